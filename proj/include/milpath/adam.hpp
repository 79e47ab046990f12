#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "milpath/error.hpp"
#include "milpath/tensor.hpp"

namespace milpath {

struct AdamConfig {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-5;
};

// Moments are sized lazily on the first step, then pinned to those shapes.
struct AdamState {
    AdamState() = default;
    explicit AdamState(const AdamConfig& c) : config(c) {}

    AdamConfig config;
    std::uint64_t step = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
};

/// One Adam update with bias correction.
///
/// Weight decay is the coupled L2 form: the decay term wd * w is added to
/// the gradient before the moment updates.
inline void adam_step(std::span<Tensor* const> params, std::span<const std::span<const double>> grads,
                      AdamState& state) {
    if (params.size() != grads.size()) throw ShapeError("adam_step: parameter and gradient counts differ");
    if (state.m.empty()) {
        for (const Tensor* p : params) {
            state.m.emplace_back(p->numel(), 0.0);
            state.v.emplace_back(p->numel(), 0.0);
        }
    }
    if (state.m.size() != params.size()) throw ShapeError("adam_step: optimizer state tracks a different parameter count");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (grads[i].size() != params[i]->numel() || state.m[i].size() != params[i]->numel()) {
            throw ShapeError("adam_step: shape mismatch for parameter " + std::to_string(i));
        }
    }

    const AdamConfig& c = state.config;
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double correction1 = 1.0 - std::pow(c.beta1, t);
    const double correction2 = 1.0 - std::pow(c.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto w = params[i]->values();
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t j = 0; j < w.size(); ++j) {
            const double g = grads[i][j] + c.weight_decay * w[j];
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
            const double m_hat = m[j] / correction1;
            const double v_hat = v[j] / correction2;
            w[j] -= c.lr * m_hat / (std::sqrt(v_hat) + c.eps);
        }
    }
}

// Uses each tensor's own grad buffer; a tensor without one counts as zero gradient.
inline void adam_step(std::span<Tensor* const> params, AdamState& state) {
    std::vector<std::vector<double>> zeros;
    std::vector<std::span<const double>> grads;
    grads.reserve(params.size());
    zeros.reserve(params.size());
    for (Tensor* p : params) {
        if (p->has_grad()) {
            grads.emplace_back(p->grad());
        } else {
            zeros.emplace_back(p->numel(), 0.0);
            grads.emplace_back(zeros.back());
        }
    }
    adam_step(params, grads, state);
}

}  // namespace milpath
