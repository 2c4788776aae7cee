#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "smpo/autodiff.hpp"
#include "smpo/denoiser.hpp"
#include "smpo/errors.hpp"
#include "smpo/numerics.hpp"

namespace smpo {

/// x_t = sqrt(abar) x0 + sqrt(1 - abar) eps, for an explicit cumulative retention.
inline Vector noise_with(const Vector& x0, const Vector& eps, double alpha_bar) {
    return axpby(std::sqrt(alpha_bar), x0, std::sqrt(1.0 - alpha_bar), eps);
}

inline Vector forward_noise(const Vector& x0, int t, const Vector& eps, const NoiseSchedule& sched) {
    sched.require_step(t, "forward_noise");
    return noise_with(x0, eps, sched.alpha_bar_at(t));
}

/// tau* = (x_tilde - sqrt(abar_t) x0) / sqrt(1 - abar_t): the noise that the
/// closed-form forward process would need to reach x_tilde from x0.
inline Vector implied_noise(const Vector& x_tilde, const Vector& x0, int t, const NoiseSchedule& sched) {
    sched.require_step(t, "implied_noise");
    const double ab = sched.alpha_bar_at(t);
    const double inv = 1.0 / std::sqrt(1.0 - ab);
    return axpby(inv, x_tilde, -std::sqrt(ab) * inv, x0);
}

/// Deterministic DDIM transition between two noise levels, written on the
/// cumulative retentions: x_dst = scale * x_src + coeff * eps with
///   scale = sqrt(abar_dst / abar_src)
///   coeff = sqrt(1 - abar_dst) - scale * sqrt(1 - abar_src).
/// The same formula denoises (dst < src) and inverts (dst > src), and the
/// two directions are exact algebraic inverses for a shared eps.
struct DdimTransition {
    double scale = 1.0;
    double coeff = 0.0;

    static DdimTransition between(double alpha_bar_src, double alpha_bar_dst) {
        DdimTransition tr;
        tr.scale = std::sqrt(alpha_bar_dst / alpha_bar_src);
        tr.coeff = std::sqrt(1.0 - alpha_bar_dst) - tr.scale * std::sqrt(1.0 - alpha_bar_src);
        return tr;
    }

    static DdimTransition between(const NoiseSchedule& sched, int t_src, int t_dst) {
        return between(sched.alpha_bar_at(t_src), sched.alpha_bar_at(t_dst));
    }

    Vector apply(const Vector& x_src, const Vector& eps) const { return axpby(scale, x_src, coeff, eps); }
};

/// Timesteps 0 = g_0 < g_1 < ... < g_k = t_end with k = min(steps, t_end),
/// evenly spaced up to integer rounding.
inline std::vector<int> uniform_grid(int t_end, int steps) {
    if (t_end < 1) throw InvalidRangeError("uniform_grid: end step must be >= 1");
    if (steps < 1) throw InvalidRangeError("uniform_grid: steps must be >= 1");
    const long k = std::min(steps, t_end);
    std::vector<int> grid;
    grid.reserve(static_cast<std::size_t>(k) + 1);
    for (long i = 0; i <= k; ++i) grid.push_back(static_cast<int>((2 * i * t_end + k) / (2 * k)));
    return grid;
}

namespace detail {

/// The network is only defined on t >= 1; the inversion step leaving the clean
/// sample queries the first noisy step instead of t = 0.
inline int query_step(int t) { return std::max(t, 1); }

}  // namespace detail

template <NoisePredictor P>
Vector ddim_step(const P& model, const Vector& x_t, int t_from, int t_to, const Vector& c, double w,
                 const NoiseSchedule& sched) {
    if (t_to >= t_from) {
        throw TimestepOrderError("ddim_step: need t_to < t_from, got " + std::to_string(t_to) + " >= " +
                                 std::to_string(t_from));
    }
    if (t_to < 0 || t_from > sched.T) throw InvalidRangeError("ddim_step: timesteps outside [0, T]");
    const Vector eps = eps_predict_guided(model, x_t, t_from, c, w);
    return DdimTransition::between(sched, t_from, t_to).apply(x_t, eps);
}

/// One inversion step from t_prev up to t_next, using eps evaluated at the
/// lower (already known) point.
template <NoisePredictor P>
Vector ddim_invert_step(const P& model, const Vector& x_prev, int t_prev, int t_next, const Vector& c, double w,
                        const NoiseSchedule& sched) {
    if (t_next <= t_prev) throw TimestepOrderError("ddim_invert_step: need t_next > t_prev");
    if (t_prev < 0 || t_next > sched.T) throw InvalidRangeError("ddim_invert_step: timesteps outside [0, T]");
    const Vector eps = eps_predict_guided(model, x_prev, detail::query_step(t_prev), c, w);
    return DdimTransition::between(sched, t_prev, t_next).apply(x_prev, eps);
}

/// Denoise along an increasing grid, from grid.back() down to grid.front().
template <NoisePredictor P>
Vector ddim_sample_grid(const P& model, Vector x, const std::vector<int>& grid, const Vector& c, double w,
                        const NoiseSchedule& sched) {
    for (std::size_t i = grid.size() - 1; i > 0; --i) x = ddim_step(model, x, grid[i], grid[i - 1], c, w, sched);
    return x;
}

/// Denoise x_start (at step t_start) to t = 0 in `steps` uniform DDIM steps.
template <NoisePredictor P>
Vector ddim_sample_from(const P& model, const Vector& x_start, int t_start, const Vector& c, int steps, double w,
                        const NoiseSchedule& sched) {
    sched.require_step(t_start, "ddim_sample");
    return ddim_sample_grid(model, x_start, uniform_grid(t_start, steps), c, w, sched);
}

template <NoisePredictor P>
Vector ddim_sample(const P& model, const Vector& x_T, const Vector& c, int steps, double w,
                   const NoiseSchedule& sched) {
    return ddim_sample_from(model, x_T, sched.T, c, steps, w, sched);
}

namespace detail {

inline void check_inversion_args(int t, int inv_steps, const NoiseSchedule& sched) {
    sched.require_step(t, "inversion");
    // A budget above 10 is allowed for budget sweeps; the training default is 9.
    if (inv_steps < 1 || inv_steps > sched.T) {
        throw InvalidRangeError("inversion: inv_steps " + std::to_string(inv_steps) + " outside [1, T]");
    }
}

struct InversionPath {
    std::vector<int> grid;
    Vector penultimate;  // x_hat at grid[k-1]
    Vector last;         // x_hat at grid[k] = t
};

template <NoisePredictor P>
InversionPath invert_path(const P& model, const Vector& x0, int t, int inv_steps, const Vector& c, double w,
                          const NoiseSchedule& sched) {
    check_inversion_args(t, inv_steps, sched);
    InversionPath path;
    path.grid = uniform_grid(t, inv_steps);
    Vector x = x0;
    for (std::size_t i = 1; i < path.grid.size(); ++i) {
        if (i + 1 == path.grid.size()) path.penultimate = x;
        x = ddim_invert_step(model, x, path.grid[i - 1], path.grid[i], c, w, sched);
    }
    path.last = std::move(x);
    return path;
}

}  // namespace detail

/// Few-step DDIM inversion x0 -> x_hat_t over a uniform increasing grid.
template <NoisePredictor P>
Vector ddim_invert(const P& model, const Vector& x0, int t, int inv_steps, const Vector& c, double w,
                   const NoiseSchedule& sched) {
    return detail::invert_path(model, x0, t, inv_steps, c, w, sched).last;
}

struct InversionResult {
    Vector x_tilde;  // ReNoise-corrected latent
    Vector x_hat;    // plain DDIM-inversion estimate
    int t = 0;
    std::vector<int> grid;
    double residual_before = 0.0;
    double residual_after = 0.0;
};

/// DDIM inversion followed by ReNoise correction(s) of the final step:
///   x_tilde = scale * x_hat_{k-1} + coeff * eps(x_hat_t, t).
/// The residuals measure how far a latent z is from the fixed point of the
/// final DDIM step, || z - (scale * x_hat_{k-1} + coeff * eps(z, t)) ||.
template <NoisePredictor P>
InversionResult renoise_invert(const P& model, const Vector& x0, int t, int inv_steps, const Vector& c, double w,
                               const NoiseSchedule& sched, int renoise_iters = 1) {
    if (renoise_iters < 0) throw InvalidRangeError("renoise_invert: renoise_iters must be >= 0");
    auto path = detail::invert_path(model, x0, t, inv_steps, c, w, sched);
    const int t_prev = path.grid[path.grid.size() - 2];
    const auto tr = DdimTransition::between(sched, t_prev, t);
    auto fixed_point_map = [&](const Vector& z) {
        return tr.apply(path.penultimate, eps_predict_guided(model, z, t, c, w));
    };

    InversionResult out;
    out.t = t;
    out.x_hat = path.last;
    Vector mapped = fixed_point_map(path.last);
    out.residual_before = distance(path.last, mapped);
    Vector z = path.last;
    for (int i = 0; i < renoise_iters; ++i) {
        z = std::move(mapped);
        mapped = fixed_point_map(z);
    }
    out.residual_after = distance(z, mapped);
    out.x_tilde = std::move(z);
    out.grid = std::move(path.grid);
    return out;
}

/// A forward-noised latent packaged like an inversion result, for swapping
/// the latent source of the inversion-based objective.
inline InversionResult forward_noised_latent(const Vector& x0, int t, const Vector& eps, const NoiseSchedule& sched) {
    InversionResult r;
    r.x_tilde = forward_noise(x0, t, eps, sched);
    r.x_hat = r.x_tilde;
    r.t = t;
    r.grid = {0, t};
    return r;
}

// ---------------------------------------------------------------------------
// On-tape variants, used when gradients flow through the inversion.
// ---------------------------------------------------------------------------

inline LossGraph::NodeId guided_on_graph(LossGraph& g, const DenoiserModel& model, LossGraph::NodeId x, int t,
                                         const Vector& c, double w, bool trainable) {
    if (w == 1.0) return g.net(model, x, t, c, trainable);
    const auto uncond = g.net(model, x, t, model.null_condition(), trainable);
    if (w == 0.0) return uncond;
    const auto cond = g.net(model, x, t, c, trainable);
    return g.axpby(1.0 - w, uncond, w, cond);
}

/// renoise_invert recorded on `g` with `model` trainable; returns the x_tilde node.
inline LossGraph::NodeId renoise_invert_on_graph(LossGraph& g, const DenoiserModel& model, const Vector& x0, int t,
                                                 int inv_steps, const Vector& c, double w,
                                                 const NoiseSchedule& sched, int renoise_iters = 1) {
    detail::check_inversion_args(t, inv_steps, sched);
    const auto grid = uniform_grid(t, inv_steps);
    auto x = g.constant(x0);
    LossGraph::NodeId penultimate = x;
    for (std::size_t i = 1; i < grid.size(); ++i) {
        if (i + 1 == grid.size()) penultimate = x;
        const auto eps = guided_on_graph(g, model, x, detail::query_step(grid[i - 1]), c, w, true);
        const auto tr = DdimTransition::between(sched, grid[i - 1], grid[i]);
        x = g.axpby(tr.scale, x, tr.coeff, eps);
    }
    const auto tr = DdimTransition::between(sched, grid[grid.size() - 2], t);
    for (int i = 0; i < renoise_iters; ++i) {
        const auto eps = guided_on_graph(g, model, x, t, c, w, true);
        x = g.axpby(tr.scale, penultimate, tr.coeff, eps);
    }
    return x;
}

}  // namespace smpo
