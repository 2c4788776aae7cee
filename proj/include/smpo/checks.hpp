#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "smpo/autodiff.hpp"
#include "smpo/denoiser.hpp"
#include "smpo/diffusion.hpp"
#include "smpo/numerics.hpp"
#include "smpo/objectives.hpp"
#include "smpo/preference.hpp"

namespace smpo {

// Self-checks exposed through the command line tool.

struct IdentitySweep {
    std::int64_t samples = 0;
    double max_abs_diff = 0.0;
};

/// Compares the direct smoothed-density loss with its reduced form on random
/// tuples: log-likelihoods in [-3, 3], gamma in [0.1, 10], alpha in [0, gamma],
/// beta in [0.01, 5].
inline IdentitySweep identity_sweep(std::int64_t samples, std::uint64_t seed) {
    SeededRng rng(seed);
    IdentitySweep out;
    out.samples = samples;
    for (std::int64_t i = 0; i < samples; ++i) {
        const double lw = rng.uniform(-3.0, 3.0);
        const double ll = rng.uniform(-3.0, 3.0);
        const double lw_ref = rng.uniform(-3.0, 3.0);
        const double ll_ref = rng.uniform(-3.0, 3.0);
        const double gamma = rng.uniform(0.1, 10.0);
        const double alpha = rng.uniform(0.0, gamma);
        const double beta = rng.uniform(0.01, 5.0);
        const auto v = smoothed_dpo_scalar(lw, ll, lw_ref, ll_ref, alpha, gamma, beta);
        out.max_abs_diff = std::max(out.max_abs_diff, std::abs(v.direct - v.reduced));
    }
    return out;
}

struct GradcheckReport {
    std::string loss;
    int configurations = 0;
    std::size_t num_params = 0;
    double max_rel_error = 0.0;
};

/// max_i |a_i - n_i| / max(|a_i|, |n_i|, floor) between the tape gradient and
/// central differences of `loss_of` over every parameter of `model`.
inline double max_gradient_rel_error(const DenoiserModel& model, std::span<const double> analytic,
                                     const std::function<double(const DenoiserModel&)>& loss_of, double h = 1e-5,
                                     double floor = 1e-6) {
    DenoiserModel probe = model;
    double worst = 0.0;
    for (std::size_t i = 0; i < model.num_params(); ++i) {
        const double orig = probe.params()[i];
        probe.params()[i] = orig + h;
        const double up = loss_of(probe);
        probe.params()[i] = orig - h;
        const double down = loss_of(probe);
        probe.params()[i] = orig;
        const double numeric = (up - down) / (2.0 * h);
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
        worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
    return worst;
}

/// Gradient check of every loss on a small model (a few hundred parameters)
/// over random configurations.
inline std::vector<GradcheckReport> gradcheck(int configurations, std::uint64_t seed, double h = 1e-5) {
    DenoiserArch arch;
    arch.hidden_dim = 16;
    arch.depth = 2;
    arch.t_embed_dim = 4;
    arch.max_timestep = 20;
    const auto sched = make_schedule(arch.max_timestep, ScheduleKind::linear_beta, 1e-3, 0.2);

    std::vector<GradcheckReport> reports{{"diffusion_loss"}, {"dpo_loss"}, {"smpo_loss"}, {"smpo_loss_through_inversion"}};
    SeededRng rng(seed);
    for (int k = 0; k < configurations; ++k) {
        SeededRng init = rng.child(static_cast<std::uint64_t>(k));
        const DenoiserModel ref(arch, init);
        DenoiserModel model = ref;
        for (double& p : model.params()) p += 0.05 * rng.normal();
        PreferencePair pair;
        pair.condition = gaussian(rng, arch.cond_dim);
        pair.x_w = gaussian(rng, arch.data_dim);
        pair.x_l = gaussian(rng, arch.data_dim);
        pair.label = SmoothedLabel::make(rng.uniform(), rng.uniform(0.5, 10.0));
        const int t = static_cast<int>(rng.uniform_int(1, sched.T));
        const int inv_steps = static_cast<int>(rng.uniform_int(1, std::min(t, 9)));
        const double w = rng.uniform(0.0, 2.0);
        const double beta = rng.uniform(0.5, 5.0);
        const Vector eps_w = gaussian(rng, arch.data_dim);
        const Vector eps_l = gaussian(rng, arch.data_dim);
        const auto inv_w = renoise_invert(model, pair.x_w, t, inv_steps, pair.condition, w, sched);
        const auto inv_l = renoise_invert(model, pair.x_l, t, inv_steps, pair.condition, w, sched);

        const std::function<double(const DenoiserModel&)> losses[] = {
            [&](const DenoiserModel& m) { return diffusion_loss(m, pair.x_w, pair.condition, t, eps_w, sched).loss(); },
            [&](const DenoiserModel& m) { return dpo_loss(m, ref, pair, t, eps_w, eps_l, beta, sched).graph.loss(); },
            [&](const DenoiserModel& m) { return smpo_loss(m, ref, pair, t, inv_w, inv_l, beta, sched).graph.loss(); },
            [&](const DenoiserModel& m) {
                return smpo_loss_through_inversion(m, ref, pair, t, inv_steps, w, beta, sched).graph.loss();
            },
        };
        std::vector<GradientBundle> analytic;
        analytic.push_back(diffusion_loss(model, pair.x_w, pair.condition, t, eps_w, sched).backward(model));
        analytic.push_back(dpo_loss(model, ref, pair, t, eps_w, eps_l, beta, sched).graph.backward(model));
        analytic.push_back(smpo_loss(model, ref, pair, t, inv_w, inv_l, beta, sched).graph.backward(model));
        analytic.push_back(smpo_loss_through_inversion(model, ref, pair, t, inv_steps, w, beta, sched).graph.backward(model));
        for (std::size_t j = 0; j < reports.size(); ++j) {
            reports[j].configurations += 1;
            reports[j].num_params = model.num_params();
            reports[j].max_rel_error =
                std::max(reports[j].max_rel_error, max_gradient_rel_error(model, analytic[j].grads, losses[j], h));
        }
    }
    return reports;
}

/// ||x0 - DDIM_sample(latent from t down to 0)|| using `steps` uniform steps.
template <NoisePredictor P>
double reconstruction_error(const P& model, const Vector& x0, const Vector& latent, int t, int steps, const Vector& c,
                            double w, const NoiseSchedule& sched) {
    return distance(x0, ddim_sample_from(model, latent, t, c, steps, w, sched));
}

}  // namespace smpo
