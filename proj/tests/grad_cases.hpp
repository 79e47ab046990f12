#pragma once

// One finite-difference case per autodiff op. Each case draws its inputs
// from the seed, keeping values away from kinks (relu at 0, ties for max).
// Non-scalar outputs are reduced with a fixed random weighting so every
// output element reaches the loss with a distinct coefficient.

#include <string>
#include <vector>

#include "oracles.hpp"

namespace oracle {

struct OpCase {
    std::string name;
    std::vector<Tensor> inputs;
    LossFn loss;
};

inline Var weighted_sum(Graph& g, const Var& out, std::uint64_t seed) {
    milpath::Rng rng(seed);
    const Tensor& v = out.value();
    Tensor w(v.shape());
    for (auto& x : w.values()) x = rng.uniform(-1.0, 1.0);
    return milpath::sum(milpath::mul(out, g.constant(w)));
}

// Entries with |x| in [0.1, 1] and random sign.
inline Tensor away_from_zero(milpath::Rng& rng, std::size_t rows, std::size_t cols) {
    Tensor t({rows, cols});
    for (auto& v : t.values()) v = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.1, 1.0);
    return t;
}

inline std::vector<OpCase> op_cases(std::uint64_t seed) {
    using namespace milpath;
    Rng rng(seed);
    const std::uint64_t ws = derive_seed(seed, 99);
    auto R = [&](std::size_t r, std::size_t c) { return random_tensor(rng, r, c); };
    std::vector<OpCase> cases;
    auto reduce = [ws](auto f) {
        return [f, ws](Graph& g, const std::vector<Var>& v) { return weighted_sum(g, f(g, v), ws); };
    };

    cases.push_back({"matmul", {R(3, 4), R(4, 2)}, reduce([](Graph&, auto& v) { return matmul(v[0], v[1]); })});
    cases.push_back({"transpose", {R(3, 5)}, reduce([](Graph&, auto& v) { return transpose(v[0]); })});
    cases.push_back({"add", {R(3, 4), R(3, 4)}, reduce([](Graph&, auto& v) { return add(v[0], v[1]); })});
    cases.push_back({"sub", {R(3, 4), R(3, 4)}, reduce([](Graph&, auto& v) { return sub(v[0], v[1]); })});
    cases.push_back({"mul", {R(3, 4), R(3, 4)}, reduce([](Graph&, auto& v) { return mul(v[0], v[1]); })});
    cases.push_back({"scale", {R(2, 3)}, reduce([](Graph&, auto& v) { return scale(v[0], -1.7); })});
    cases.push_back({"add_row_broadcast", {R(4, 3), R(1, 3)},
                     reduce([](Graph&, auto& v) { return add_row_broadcast(v[0], v[1]); })});
    cases.push_back({"tanh", {R(3, 3)}, reduce([](Graph&, auto& v) { return tanh(v[0]); })});
    cases.push_back({"sigmoid", {random_tensor(rng, 3, 3, -4.0, 4.0)},
                     reduce([](Graph&, auto& v) { return sigmoid(v[0]); })});
    cases.push_back({"relu", {away_from_zero(rng, 3, 4)}, reduce([](Graph&, auto& v) { return relu(v[0]); })});
    cases.push_back({"softmax_rows", {random_tensor(rng, 3, 5, -3.0, 3.0)},
                     reduce([](Graph&, auto& v) { return softmax_rows(v[0]); })});
    {
        std::vector<std::size_t> labels = {static_cast<std::size_t>(rng.below(3)), static_cast<std::size_t>(rng.below(3)),
                                           static_cast<std::size_t>(rng.below(3)), static_cast<std::size_t>(rng.below(3))};
        cases.push_back({"cross_entropy", {random_tensor(rng, 4, 3, -3.0, 3.0)},
                         [labels](Graph&, const std::vector<Var>& v) { return cross_entropy(v[0], labels); }});
    }
    cases.push_back({"sum", {R(3, 4)}, [](Graph&, const std::vector<Var>& v) { return sum(v[0]); }});
    {
        Tensor gain = random_tensor(rng, 1, 5, 0.5, 1.5);
        cases.push_back({"layer_norm_rows", {R(3, 5), gain, R(1, 5)},
                         reduce([](Graph&, auto& v) { return layer_norm_rows(v[0], v[1], v[2]); })});
    }
    cases.push_back({"slice_rows", {R(5, 3)}, reduce([](Graph&, auto& v) { return slice_rows(v[0], 1, 3); })});
    cases.push_back({"slice_cols", {R(3, 5)}, reduce([](Graph&, auto& v) { return slice_cols(v[0], 2, 2); })});
    cases.push_back({"concat_rows", {R(2, 3), R(1, 3), R(3, 3)},
                     reduce([](Graph&, auto& v) { return concat_rows({v[0], v[1], v[2]}); })});
    cases.push_back({"concat_cols", {R(3, 2), R(3, 1), R(3, 3)},
                     reduce([](Graph&, auto& v) { return concat_cols({v[0], v[1], v[2]}); })});
    cases.push_back({"gather_rows", {R(3, 4)},
                     reduce([](Graph&, auto& v) { return gather_rows(v[0], {2, 0, 1, 0, 2}); })});
    cases.push_back({"depthwise_conv2d_k3", {R(9, 2), R(2, 9), R(1, 2)},
                     reduce([](Graph&, auto& v) { return depthwise_conv2d(v[0], v[1], v[2], 3, 3); })});
    cases.push_back({"depthwise_conv2d_k7", {R(16, 2), R(2, 49), R(1, 2)},
                     reduce([](Graph&, auto& v) { return depthwise_conv2d(v[0], v[1], v[2], 4, 7); })});
    {
        // Entries are spread at least 0.05 apart so the argmax is stable under +-h.
        std::vector<double> vals;
        for (int i = 0; i < 6; ++i) vals.push_back(0.05 * i);
        rng.shuffle(std::span<double>(vals));
        cases.push_back({"max_all", {Tensor({2, 3}, vals)},
                         [](Graph&, const std::vector<Var>& v) { return scale(max_all(v[0]), 1.3); }});
    }
    cases.push_back({"reciprocal", {random_tensor(rng, 2, 3, 0.5, 2.0)},
                     reduce([](Graph&, auto& v) { return reciprocal(v[0]); })});
    cases.push_back({"scale_by", {R(3, 3), R(1, 1)}, reduce([](Graph&, auto& v) { return scale_by(v[0], v[1]); })});
    // A composite chain exercising gradient accumulation through a reused node.
    cases.push_back({"reuse_chain", {R(3, 3), R(3, 3)}, reduce([](Graph&, auto& v) {
                         Var a = tanh(matmul(v[0], v[1]));
                         return add(mul(a, a), matmul(a, transpose(v[0])));
                     })});
    return cases;
}

inline GradReport check_op_case(OpCase& c) {
    std::vector<Tensor*> leaves;
    std::vector<std::string> names;
    for (std::size_t i = 0; i < c.inputs.size(); ++i) {
        leaves.push_back(&c.inputs[i]);
        names.push_back(c.name + "[" + std::to_string(i) + "]");
    }
    return check_gradients(leaves, names, c.loss);
}

// Bag shapes for the architecture gradient checks: 6 patches, small widths.
inline milpath::ModelConfig small_model_config(milpath::ModelKind kind, std::uint64_t seed, bool nystrom = false) {
    milpath::ModelConfig c;
    c.kind = kind;
    c.input_dim = 8;
    c.embed_dim = 8;
    c.hidden_dim = 6;
    c.n_heads = 2;
    c.nystrom = nystrom;
    c.landmarks = 4;
    c.seed = seed;
    return c;
}

}  // namespace oracle
