#pragma once

// Bag-level classifiers over patch embeddings.
//
//   AM-SB     gated attention pooling, one attention branch, one linear head
//   AM-MB     one attention branch and one single-logit head per class
//   TransMIL  class token + two self-attention blocks with a PPEG positional
//             encoder (depthwise 7/5/3 convs over the squared token grid)
//
// All forwards run on the autodiff tape, so the same code serves training
// and inference.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "milpath/error.hpp"
#include "milpath/feature_bag.hpp"
#include "milpath/params.hpp"
#include "milpath/rng.hpp"
#include "milpath/tensor.hpp"

namespace milpath {

enum class ModelKind { AmSb, AmMb, TransMil };

inline std::string_view model_kind_name(ModelKind kind) {
    switch (kind) {
        case ModelKind::AmSb: return "AM-SB";
        case ModelKind::AmMb: return "AM-MB";
        case ModelKind::TransMil: return "TransMIL";
    }
    return "?";
}

inline ModelKind parse_model_kind(std::string_view text) {
    std::string s;
    for (char c : text) {
        if (c == '-' || c == '_') continue;
        s += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    if (s == "amsb") return ModelKind::AmSb;
    if (s == "ammb") return ModelKind::AmMb;
    if (s == "transmil") return ModelKind::TransMil;
    throw Error("unknown architecture '" + std::string(text) + "' (expected AM-SB, AM-MB or TransMIL)");
}

struct ModelConfig {
    ModelKind kind = ModelKind::AmSb;
    std::size_t input_dim = 1024;  // D, patch feature length
    std::size_t embed_dim = 512;   // E
    std::size_t hidden_dim = 256;  // H, gated-attention hidden size
    std::size_t n_classes = 2;
    std::size_t n_heads = 8;       // TransMIL self-attention heads
    bool nystrom = false;          // TransMIL: Nystrom-approximated attention
    std::size_t landmarks = 256;   // Nystrom landmark count (capped at token count)
    std::size_t pinv_iterations = 6;
    std::uint64_t seed = 42;

    void validate() const {
        if (input_dim == 0 || embed_dim == 0 || hidden_dim == 0) throw Error("model dims must be positive");
        if (n_classes != 2) throw Error("only binary heads (C = 2) are supported");
        if (kind == ModelKind::TransMil) {
            if (n_heads == 0 || embed_dim % n_heads != 0) {
                throw Error("TransMIL head count " + std::to_string(n_heads) + " must divide embed dim " +
                            std::to_string(embed_dim));
            }
            if (nystrom && landmarks == 0) throw Error("Nystrom attention needs at least one landmark");
        }
    }
};

inline constexpr std::size_t kPpegKernels[] = {7, 5, 3};

class MilModel {
public:
    /// Builds the parameter set for `config` and initialises it:
    /// weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)) drawn in parameter order
    /// from Rng(config.seed); biases and norm offsets 0, norm gains 1.
    explicit MilModel(const ModelConfig& config) : config_(config) {
        config_.validate();
        const std::size_t D = config_.input_dim, E = config_.embed_dim, H = config_.hidden_dim, C = config_.n_classes;
        Rng rng(config_.seed);
        auto weight = [&](std::string name, std::size_t rows, std::size_t fan_in) {
            Tensor t({rows, fan_in});
            const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
            for (auto& v : t.values()) v = rng.uniform(-bound, bound);
            params_.add(std::move(name), std::move(t));
        };
        auto filled = [&](std::string name, std::size_t rows, std::size_t cols, double value) {
            params_.add(std::move(name), Tensor({rows, cols}, value));
        };

        weight("embed.weight", E, D);
        filled("embed.bias", 1, E, 0.0);
        switch (config_.kind) {
            case ModelKind::AmSb:
            case ModelKind::AmMb: {
                const std::size_t branches = config_.kind == ModelKind::AmSb ? 1 : C;
                weight("attention.V.weight", H, E);
                filled("attention.V.bias", 1, H, 0.0);
                weight("attention.U.weight", H, E);
                filled("attention.U.bias", 1, H, 0.0);
                weight("attention.w", branches, H);
                if (config_.kind == ModelKind::AmSb) {
                    weight("classifier.weight", C, E);
                    filled("classifier.bias", 1, C, 0.0);
                } else {
                    for (std::size_t c = 0; c < C; ++c) {
                        weight("classifier." + std::to_string(c) + ".weight", 1, E);
                        filled("classifier." + std::to_string(c) + ".bias", 1, 1, 0.0);
                    }
                }
                break;
            }
            case ModelKind::TransMil: {
                weight("cls_token", 1, E);
                for (int layer = 0; layer < 2; ++layer) {
                    const std::string p = "layer" + std::to_string(layer) + ".";
                    filled(p + "norm.gain", 1, E, 1.0);
                    filled(p + "norm.bias", 1, E, 0.0);
                    weight(p + "q.weight", E, E);
                    weight(p + "k.weight", E, E);
                    weight(p + "v.weight", E, E);
                    weight(p + "out.weight", E, E);
                    filled(p + "out.bias", 1, E, 0.0);
                    if (layer == 0) {
                        for (auto k : kPpegKernels) {
                            weight("ppeg.conv" + std::to_string(k) + ".weight", E, k * k);
                            filled("ppeg.conv" + std::to_string(k) + ".bias", 1, E, 0.0);
                        }
                    }
                }
                filled("norm.gain", 1, E, 1.0);
                filled("norm.bias", 1, E, 0.0);
                weight("head.weight", C, E);
                filled("head.bias", 1, C, 0.0);
                break;
            }
        }
    }

    const ModelConfig& config() const { return config_; }
    ModelKind kind() const { return config_.kind; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

private:
    ModelConfig config_;
    ParamStore params_;
};

// --- building blocks --------------------------------------------------------

// x W^T + b for W [out x in], b [1 x out].
inline Var linear(const Var& x, const Var& weight, const Var& bias) {
    return add_row_broadcast(matmul(x, transpose(weight)), bias);
}

inline Var linear(const Var& x, const Var& weight) { return matmul(x, transpose(weight)); }

struct GatedAttentionVars {
    Var v_weight, v_bias;  // tanh branch, [H x E], [1 x H]
    Var u_weight, u_bias;  // sigmoid branch
    Var score;             // [branches x H]
};

/// Attention weights [branches x N] for instance embeddings h [N x E]:
/// a_k proportional to exp(w^T (tanh(V h_k) * sigmoid(U h_k))), normalised over k.
inline Var gated_attention(const Var& h, const GatedAttentionVars& p) {
    if (h.value().rows() == 0) throw Error("gated_attention: empty bag");
    if (h.value().cols() != p.v_weight.value().cols()) {
        throw ShapeError("gated_attention: instance dim " + std::to_string(h.value().cols()) +
                         " does not match attention input dim " + std::to_string(p.v_weight.value().cols()));
    }
    Var a = tanh(linear(h, p.v_weight, p.v_bias));
    Var b = sigmoid(linear(h, p.u_weight, p.u_bias));
    Var scores = linear(mul(a, b), p.score);  // [N x branches]
    return softmax_rows(transpose(scores));
}

struct ForwardPass {
    Var logits;     // [1 x C]
    Var attention;  // AM: [branches x N]; TransMIL: [1 x N] class-token row, first block, head-averaged
};

namespace detail {

inline Var param(Graph& g, MilModel& model, const std::string& name) { return g.parameter(model.params().at(name)); }

inline void check_instances(const Tensor& x, const ModelConfig& cfg) {
    if (x.rank() != 2 || x.rows() == 0) throw Error("model forward: empty bag");
    if (x.cols() != cfg.input_dim) {
        throw ShapeError("model forward: bag feature dim " + std::to_string(x.cols()) + " != model input dim " +
                         std::to_string(cfg.input_dim));
    }
}

inline Var embed(Graph& g, MilModel& m, const Var& x) {
    return relu(linear(x, param(g, m, "embed.weight"), param(g, m, "embed.bias")));
}

inline GatedAttentionVars attention_vars(Graph& g, MilModel& m) {
    return {param(g, m, "attention.V.weight"), param(g, m, "attention.V.bias"), param(g, m, "attention.U.weight"),
            param(g, m, "attention.U.bias"), param(g, m, "attention.w")};
}

}  // namespace detail

/// AM-SB on instance features x [N x D]: z = sum_k a_k h_k, logits = W z + b.
inline ForwardPass am_sb_forward(Graph& g, MilModel& model, const Tensor& x) {
    if (model.kind() != ModelKind::AmSb) throw Error("am_sb_forward: model is " + std::string(model_kind_name(model.kind())));
    detail::check_instances(x, model.config());
    Var h = detail::embed(g, model, g.constant(x));
    Var a = gated_attention(h, detail::attention_vars(g, model));
    Var z = matmul(a, h);
    Var logits = linear(z, detail::param(g, model, "classifier.weight"), detail::param(g, model, "classifier.bias"));
    return {logits, a};
}

/// AM-MB: per class c, z_c = sum_k a_k^(c) h_k and logit_c = head_c(z_c).
inline ForwardPass am_mb_forward(Graph& g, MilModel& model, const Tensor& x) {
    if (model.kind() != ModelKind::AmMb) throw Error("am_mb_forward: model is " + std::string(model_kind_name(model.kind())));
    detail::check_instances(x, model.config());
    Var h = detail::embed(g, model, g.constant(x));
    Var a = gated_attention(h, detail::attention_vars(g, model));
    Var z = matmul(a, h);  // [C x E]
    std::vector<Var> per_class;
    for (std::size_t c = 0; c < model.config().n_classes; ++c) {
        const std::string p = "classifier." + std::to_string(c) + ".";
        per_class.push_back(linear(slice_rows(z, c, 1), detail::param(g, model, p + "weight"),
                                   detail::param(g, model, p + "bias")));
    }
    return {concat_cols(per_class), a};
}

// --- TransMIL ---------------------------------------------------------------

/// Instance order after sequence squaring: M = ceil(sqrt(N)), then the
/// first M^2 - N instances are appended again in order.
inline std::vector<std::size_t> squared_sequence(std::size_t n) {
    if (n == 0) throw Error("squared_sequence: empty bag");
    std::size_t side = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n))));
    while (side * side < n) ++side;
    while (side > 1 && (side - 1) * (side - 1) >= n) --side;
    std::vector<std::size_t> idx(side * side);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i % n;
    return idx;
}

namespace detail {

inline Tensor identity(std::size_t n, double scale_value = 1.0) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t(i, i) = scale_value;
    return t;
}

// [m x n] averaging matrix over m contiguous, near-equal segments of n rows.
inline Tensor segment_means(std::size_t m, std::size_t n) {
    Tensor t({m, n});
    std::size_t start = 0;
    for (std::size_t s = 0; s < m; ++s) {
        const std::size_t len = n / m + (s < n % m ? 1 : 0);
        for (std::size_t j = start; j < start + len; ++j) t(s, j) = 1.0 / static_cast<double>(len);
        start += len;
    }
    return t;
}

/// Iterative Moore-Penrose pseudo-inverse (order-3 Newton-Schulz) of a
/// row-stochastic square matrix x. Initial scale is 1 / (max column sum *
/// max row sum); row sums are exactly 1 for softmax output.
inline Var iterative_pinv(Graph& g, const Var& x, std::size_t iterations) {
    const std::size_t m = x.value().rows();
    Var colsum = matmul(g.constant(Tensor({1, m}, 1.0)), x);
    Var z = scale_by(transpose(x), reciprocal(max_all(colsum)));
    for (std::size_t it = 0; it < iterations; ++it) {
        Var xz = matmul(x, z);
        Var inner = sub(g.constant(identity(m, 7.0)), xz);
        inner = sub(g.constant(identity(m, 15.0)), matmul(xz, inner));
        inner = sub(g.constant(identity(m, 13.0)), matmul(xz, inner));
        z = scale(matmul(z, inner), 0.25);
    }
    return z;
}

struct AttentionOutput {
    Var out;        // [T x E]
    Var cls_row;    // [1 x T], head-averaged attention of token 0
};

inline AttentionOutput self_attention(Graph& g, MilModel& m, const std::string& prefix, const Var& x) {
    const auto& cfg = m.config();
    const std::size_t E = cfg.embed_dim, heads = cfg.n_heads, d = E / heads;
    const std::size_t T = x.value().rows();
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    Var q = linear(x, param(g, m, prefix + "q.weight"));
    Var k = linear(x, param(g, m, prefix + "k.weight"));
    Var v = linear(x, param(g, m, prefix + "v.weight"));

    std::vector<Var> head_out;
    Var cls_sum;
    for (std::size_t h = 0; h < heads; ++h) {
        Var qh = slice_cols(q, h * d, d);
        Var kh = slice_cols(k, h * d, d);
        Var vh = slice_cols(v, h * d, d);
        Var out_h, cls_h;
        if (!cfg.nystrom) {
            Var p = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt_d));
            out_h = matmul(p, vh);
            cls_h = slice_rows(p, 0, 1);
        } else {
            const std::size_t lm = std::min(cfg.landmarks, T);
            Var avg = g.constant(segment_means(lm, T));
            Var q_land = matmul(avg, qh);
            Var k_land = matmul(avg, kh);
            Var k1 = softmax_rows(scale(matmul(qh, transpose(k_land)), inv_sqrt_d));      // [T x lm]
            Var k2 = softmax_rows(scale(matmul(q_land, transpose(k_land)), inv_sqrt_d));  // [lm x lm]
            Var k3 = softmax_rows(scale(matmul(q_land, transpose(kh)), inv_sqrt_d));      // [lm x T]
            Var bridge = matmul(iterative_pinv(g, k2, cfg.pinv_iterations), k3);          // [lm x T]
            out_h = matmul(k1, matmul(bridge, vh));
            cls_h = matmul(slice_rows(k1, 0, 1), bridge);
        }
        head_out.push_back(out_h);
        cls_sum = h == 0 ? cls_h : add(cls_sum, cls_h);
    }
    Var merged = heads == 1 ? head_out[0] : concat_cols(head_out);
    Var out = linear(merged, param(g, m, prefix + "out.weight"), param(g, m, prefix + "out.bias"));
    return {out, scale(cls_sum, 1.0 / static_cast<double>(heads))};
}

// Pre-norm residual block: x + attn(norm(x)).
inline AttentionOutput transformer_layer(Graph& g, MilModel& m, int layer, const Var& x) {
    const std::string p = "layer" + std::to_string(layer) + ".";
    Var y = layer_norm_rows(x, param(g, m, p + "norm.gain"), param(g, m, p + "norm.bias"));
    auto attn = self_attention(g, m, p, y);
    return {add(x, attn.out), attn.cls_row};
}

// Positional encoding: grid tokens + conv7 + conv5 + conv3, class token passed through.
inline Var ppeg(Graph& g, MilModel& m, const Var& tokens, std::size_t side) {
    const std::size_t grid = side * side;
    Var cls = slice_rows(tokens, 0, 1);
    Var feat = slice_rows(tokens, 1, grid);
    Var acc = feat;
    for (auto k : kPpegKernels) {
        const std::string p = "ppeg.conv" + std::to_string(k) + ".";
        acc = add(acc, depthwise_conv2d(feat, param(g, m, p + "weight"), param(g, m, p + "bias"), side, k));
    }
    return concat_rows({cls, acc});
}

}  // namespace detail

inline ForwardPass transmil_forward(Graph& g, MilModel& model, const Tensor& x) {
    if (model.kind() != ModelKind::TransMil) {
        throw Error("transmil_forward: model is " + std::string(model_kind_name(model.kind())));
    }
    detail::check_instances(x, model.config());
    const std::size_t n = x.rows();
    auto order = squared_sequence(n);
    const std::size_t side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(order.size()))));

    Var h = detail::embed(g, model, g.constant(x));
    if (order.size() != n) h = gather_rows(h, std::move(order));
    Var tokens = concat_rows({detail::param(g, model, "cls_token"), h});
    auto first = detail::transformer_layer(g, model, 0, tokens);
    tokens = detail::ppeg(g, model, first.out, side);
    tokens = detail::transformer_layer(g, model, 1, tokens).out;
    Var cls = layer_norm_rows(slice_rows(tokens, 0, 1), detail::param(g, model, "norm.gain"),
                              detail::param(g, model, "norm.bias"));
    Var logits = linear(cls, detail::param(g, model, "head.weight"), detail::param(g, model, "head.bias"));
    // drop the class token column and the padding duplicates
    Var attention = slice_cols(first.cls_row, 1, n);
    return {logits, attention};
}

inline ForwardPass model_forward(Graph& g, MilModel& model, const Tensor& x) {
    switch (model.kind()) {
        case ModelKind::AmSb: return am_sb_forward(g, model, x);
        case ModelKind::AmMb: return am_mb_forward(g, model, x);
        case ModelKind::TransMil: return transmil_forward(g, model, x);
    }
    throw Error("unknown model kind");
}

// --- bag-level API ------------------------------------------------------------

/// Instance matrix for a bag plus the patch index of each row.
///
/// Attention models see patches sorted by (y, x): coordinates are unique in
/// a bag, so every permutation of the same bag yields the same row order
/// and therefore bit-identical reductions. TransMIL keeps the stored order,
/// which defines its token grid.
struct BagInput {
    Tensor features;
    std::vector<std::size_t> order;  // row i holds bag patch order[i]
};

inline BagInput prepare_input(const FeatureBag& bag, ModelKind kind) {
    if (bag.size() == 0) throw Error("bag " + bag.slide_id + " is empty");
    BagInput in;
    in.order.resize(bag.size());
    std::iota(in.order.begin(), in.order.end(), std::size_t{0});
    if (kind != ModelKind::TransMil) {
        std::sort(in.order.begin(), in.order.end(), [&](std::size_t a, std::size_t b) {
            const auto& ca = bag.coords[a];
            const auto& cb = bag.coords[b];
            return std::tie(ca.y, ca.x) < std::tie(cb.y, cb.x);
        });
    }
    in.features = Tensor({bag.size(), bag.dim});
    for (std::size_t r = 0; r < bag.size(); ++r) {
        auto f = bag.feature(in.order[r]);
        for (std::size_t c = 0; c < bag.dim; ++c) in.features(r, c) = static_cast<double>(f[c]);
    }
    return in;
}

struct BagPrediction {
    std::vector<double> logits;
    std::vector<double> probabilities;
    std::vector<std::vector<double>> attention;  // per branch, indexed like the bag's patches
    std::size_t predicted_class = 0;

    double positive_probability() const { return probabilities.at(1); }

    // Branch shown in heatmaps: the predicted class's branch for AM-MB, else the only row.
    const std::vector<double>& display_attention() const {
        return attention.size() > 1 ? attention.at(predicted_class) : attention.at(0);
    }
};

inline BagPrediction predict(MilModel& model, const FeatureBag& bag) {
    if (bag.dim != model.config().input_dim) {
        throw ShapeError("bag " + bag.slide_id + " has dim " + std::to_string(bag.dim) + ", model expects " +
                         std::to_string(model.config().input_dim));
    }
    auto in = prepare_input(bag, model.kind());
    Graph g;
    auto pass = model_forward(g, model, in.features);
    BagPrediction out;
    const Tensor& L = pass.logits.value();
    out.logits.assign(L.values().begin(), L.values().end());
    const double mx = *std::max_element(out.logits.begin(), out.logits.end());
    double total = 0.0;
    for (double l : out.logits) total += std::exp(l - mx);
    for (double l : out.logits) out.probabilities.push_back(std::exp(l - mx) / total);
    out.predicted_class = static_cast<std::size_t>(std::max_element(out.logits.begin(), out.logits.end()) - out.logits.begin());
    const Tensor& A = pass.attention.value();
    for (std::size_t b = 0; b < A.rows(); ++b) {
        std::vector<double> row(bag.size());
        for (std::size_t r = 0; r < bag.size(); ++r) row[in.order[r]] = A(b, r);
        out.attention.push_back(std::move(row));
    }
    return out;
}

}  // namespace milpath
