#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

#include "smpo/errors.hpp"

namespace smpo {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // decoupled
};

struct AdamState {
    std::int64_t step = 0;
    std::vector<double> m;
    std::vector<double> v;

    friend bool operator==(const AdamState&, const AdamState&) = default;
};

/// One AdamW update with bias correction:
///   p <- p (1 - lr wd)
///   m <- b1 m + (1 - b1) g,   v <- b2 v + (1 - b2) g^2
///   p <- p - lr * m_hat / (sqrt(v_hat) + eps)
inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, double lr,
                      const AdamConfig& cfg = {}) {
    if (grads.size() != params.size()) throw DimensionMismatchError("adam_step: gradient/parameter sizes differ");
    if (state.m.empty() && state.v.empty()) {
        state.m.assign(params.size(), 0.0);
        state.v.assign(params.size(), 0.0);
    }
    if (state.m.size() != params.size() || state.v.size() != params.size()) {
        throw DimensionMismatchError("adam_step: optimizer state does not match parameters");
    }
    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    const double decay = 1.0 - lr * cfg.weight_decay;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        const double m_hat = state.m[i] / bc1;
        const double v_hat = state.v[i] / bc2;
        if (cfg.weight_decay != 0.0) params[i] *= decay;
        params[i] -= lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
}

/// Linear warm-up: lr * min(1, step / warmup_steps) for step = 1, 2, ...
inline double warmup_lr(double lr, std::int64_t step, std::int64_t warmup_steps) {
    if (warmup_steps <= 0) return lr;
    return lr * std::min(1.0, static_cast<double>(step) / static_cast<double>(warmup_steps));
}

/// Warm-up followed by a half-cosine decay to zero at total_steps.
inline double warmup_cosine_lr(double lr, std::int64_t step, std::int64_t warmup_steps, std::int64_t total_steps) {
    if (step <= warmup_steps) return warmup_lr(lr, step, warmup_steps);
    const double span = static_cast<double>(std::max<std::int64_t>(total_steps - warmup_steps, 1));
    const double progress = std::min(1.0, static_cast<double>(step - warmup_steps) / span);
    return lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace smpo
