#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>

#include "smpo/smpo.hpp"

namespace smpo::testing {

inline DenoiserArch tiny_arch(int T = 20) {
    DenoiserArch a;
    a.hidden_dim = 8;
    a.depth = 2;
    a.t_embed_dim = 4;
    a.max_timestep = T;
    return a;
}

inline NoiseSchedule tiny_schedule(int T = 20) { return make_schedule(T, ScheduleKind::linear_beta, 1e-3, 0.2); }

inline DenoiserModel random_model(const DenoiserArch& arch, std::uint64_t seed) {
    SeededRng rng(seed);
    return DenoiserModel(arch, rng);
}

inline DenoiserModel perturbed(DenoiserModel m, std::uint64_t seed, double scale = 0.05) {
    SeededRng rng(seed);
    for (double& p : m.params()) p += scale * rng.normal();
    return m;
}

inline PreferencePair random_pair(SeededRng& rng, std::size_t dim = 2, double ratio = -1.0, double gamma = 10.0) {
    PreferencePair p;
    p.id = "q";
    p.condition = gaussian(rng, dim);
    p.x_w = gaussian(rng, dim);
    p.x_l = gaussian(rng, dim);
    p.label = SmoothedLabel::make(ratio < 0.0 ? rng.uniform() : ratio, gamma);
    return p;
}

/// Central finite differences of f over every parameter.
inline std::vector<double> numeric_gradient(const DenoiserModel& model,
                                            const std::function<double(const DenoiserModel&)>& f, double h = 1e-5) {
    DenoiserModel probe = model;
    std::vector<double> g(model.num_params());
    for (std::size_t i = 0; i < g.size(); ++i) {
        const double orig = probe.params()[i];
        probe.params()[i] = orig + h;
        const double up = f(probe);
        probe.params()[i] = orig - h;
        const double down = f(probe);
        probe.params()[i] = orig;
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

inline double max_rel_error(std::span<const double> a, std::span<const double> n, double floor = 1e-6) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, std::abs(a[i] - n[i]) / std::max({std::abs(a[i]), std::abs(n[i]), floor}));
    }
    return worst;
}

/// Noise predictor eps(x, t) = A x (condition ignored), for closed-form checks.
struct LinearPredictor {
    double a00 = 0.0, a01 = 0.0, a10 = 0.0, a11 = 0.0;
    Vector predict(const Vector& x, int, const Vector&) const {
        return Vector{a00 * x[0] + a01 * x[1], a10 * x[0] + a11 * x[1]};
    }
    Vector null_condition() const { return Vector{0.0, 0.0}; }
};

}  // namespace smpo::testing
