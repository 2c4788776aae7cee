#pragma once

#include <cmath>
#include <string>

#include "smpo/autodiff.hpp"
#include "smpo/denoiser.hpp"
#include "smpo/diffusion.hpp"
#include "smpo/errors.hpp"
#include "smpo/numerics.hpp"
#include "smpo/preference.hpp"

namespace smpo {

/// Per-pair quantities of a preference loss.
///   margin = -coefficient * beta * (s_w - s_l),   loss = -log sigmoid(margin)
struct PairScoreBreakdown {
    double s_w = 0.0;
    double s_l = 0.0;
    int t = 0;
    double coefficient = 1.0;
    double beta = 0.0;
    double loss = 0.0;
    double margin = 0.0;
};

struct PairLoss {
    LossGraph graph;
    PairScoreBreakdown breakdown;
};

/// -log sigmoid(m), evaluated as softplus(-m).
inline double neg_log_sigmoid(double margin) noexcept { return softplus(-margin); }

namespace detail {

inline void require_same_arch(const DenoiserModel& model, const DenoiserModel& ref) {
    if (!model.same_architecture(ref)) throw ArchitectureMismatchError("model and reference architectures differ");
}

inline void require_beta(double beta) {
    if (!(beta > 0.0)) throw InvalidRangeError("beta must be > 0");
}

/// ||target - eps_theta(x)||^2 - ||target - eps_ref(x)||^2 on the tape.
inline LossGraph::NodeId score_on_graph(LossGraph& g, const DenoiserModel& model, const DenoiserModel& ref,
                                        LossGraph::NodeId x, LossGraph::NodeId target, int t, const Vector& c) {
    const auto pred = g.net(model, x, t, c, true);
    const auto pred_ref = g.net(ref, x, t, c, false);
    return g.sub(g.squared_distance(target, pred), g.squared_distance(target, pred_ref));
}

inline PairLoss finish_pair_loss(LossGraph g, LossGraph::NodeId s_w, LossGraph::NodeId s_l, int t,
                                 double coefficient, double beta) {
    const auto margin = g.scale(-coefficient * beta, g.sub(s_w, s_l));
    g.set_output(g.softplus(g.scale(-1.0, margin)));
    PairScoreBreakdown b;
    b.s_w = g.scalar_value(s_w);
    b.s_l = g.scalar_value(s_l);
    b.t = t;
    b.coefficient = coefficient;
    b.beta = beta;
    b.margin = g.scalar_value(margin);
    b.loss = g.loss();
    return PairLoss{std::move(g), b};
}

}  // namespace detail

/// lambda(t) ||eps_theta(x_t, t, c) - eps||^2 with x_t forward-noised from x0.
inline LossGraph diffusion_loss(const DenoiserModel& model, const Vector& x0, const Vector& c, int t, const Vector& eps,
                                const NoiseSchedule& sched) {
    LossGraph g;
    const auto xt = g.constant(forward_noise(x0, t, eps, sched));
    const auto pred = g.net(model, xt, t, c, true);
    const auto target = g.constant(eps);
    g.set_output(g.scale(sched.loss_weight(t), g.squared_distance(pred, target)));
    return g;
}

/// Forward-noising score: ||eps - eps_theta(x_t)||^2 - ||eps - eps_ref(x_t)||^2.
/// Negative when the trainable model denoises this sample better than the reference.
inline double dpo_score(const DenoiserModel& model, const DenoiserModel& ref, const Vector& x0, const Vector& c, int t,
                        const Vector& eps, const NoiseSchedule& sched) {
    detail::require_same_arch(model, ref);
    const Vector xt = forward_noise(x0, t, eps, sched);
    return squared_distance(eps, model.predict(xt, t, c)) - squared_distance(eps, ref.predict(xt, t, c));
}

/// Diffusion-DPO pair loss with forward-noised latents (coefficient fixed at 1).
inline PairLoss dpo_loss(const DenoiserModel& model, const DenoiserModel& ref, const PreferencePair& pair, int t,
                         const Vector& eps_w, const Vector& eps_l, double beta, const NoiseSchedule& sched) {
    detail::require_same_arch(model, ref);
    detail::require_beta(beta);
    LossGraph g;
    const auto xw = g.constant(forward_noise(pair.x_w, t, eps_w, sched));
    const auto xl = g.constant(forward_noise(pair.x_l, t, eps_l, sched));
    const auto s_w = detail::score_on_graph(g, model, ref, xw, g.constant(eps_w), t, pair.condition);
    const auto s_l = detail::score_on_graph(g, model, ref, xl, g.constant(eps_l), t, pair.condition);
    return detail::finish_pair_loss(std::move(g), s_w, s_l, t, 1.0, beta);
}

/// Inversion score: ||tau* - eps_theta(x_tilde)||^2 - ||tau* - eps_ref(x_tilde)||^2
/// with tau* the implied noise of x_tilde. x_tilde enters as a constant.
inline double smpo_score(const DenoiserModel& model, const DenoiserModel& ref, const Vector& x0, const Vector& c, int t,
                         const InversionResult& inversion, const NoiseSchedule& sched) {
    detail::require_same_arch(model, ref);
    if (inversion.t != t) {
        throw InvalidRangeError("smpo_score: inversion is at t=" + std::to_string(inversion.t) + ", loss at t=" +
                                std::to_string(t));
    }
    const Vector tau = implied_noise(inversion.x_tilde, x0, t, sched);
    return squared_distance(tau, model.predict(inversion.x_tilde, t, c)) -
           squared_distance(tau, ref.predict(inversion.x_tilde, t, c));
}

/// SmPO pair loss: -log sigmoid(-(2 alpha - gamma) beta (s_w - s_l)) on inverted latents.
inline PairLoss smpo_loss(const DenoiserModel& model, const DenoiserModel& ref, const PreferencePair& pair, int t,
                          const InversionResult& inv_w, const InversionResult& inv_l, double beta,
                          const NoiseSchedule& sched) {
    detail::require_same_arch(model, ref);
    detail::require_beta(beta);
    if (!pair.label) throw MissingLabelError("smpo_loss: pair '" + pair.id + "' has no smoothed label");
    if (inv_w.t != t || inv_l.t != t) throw InvalidRangeError("smpo_loss: inversion timestep differs from loss timestep");
    LossGraph g;
    auto side = [&](const Vector& x0, const InversionResult& inv) {
        const auto x = g.constant(inv.x_tilde);
        const auto tau = g.constant(implied_noise(inv.x_tilde, x0, t, sched));
        return detail::score_on_graph(g, model, ref, x, tau, t, pair.condition);
    };
    const auto s_w = side(pair.x_w, inv_w);
    const auto s_l = side(pair.x_l, inv_l);
    return detail::finish_pair_loss(std::move(g), s_w, s_l, t, pair.label->coefficient, beta);
}

/// smpo_loss with the inversion recorded on the tape, so gradients also
/// flow through every eps_theta evaluation of the inversion and ReNoise steps.
inline PairLoss smpo_loss_through_inversion(const DenoiserModel& model, const DenoiserModel& ref,
                                            const PreferencePair& pair, int t, int inv_steps, double inv_guidance,
                                            double beta, const NoiseSchedule& sched, int renoise_iters = 1) {
    detail::require_same_arch(model, ref);
    detail::require_beta(beta);
    if (!pair.label) throw MissingLabelError("smpo_loss: pair '" + pair.id + "' has no smoothed label");
    sched.require_step(t, "smpo_loss");
    LossGraph g;
    const double ab = sched.alpha_bar_at(t);
    const double inv_sd = 1.0 / std::sqrt(1.0 - ab);
    auto side = [&](const Vector& x0) {
        const auto x = renoise_invert_on_graph(g, model, x0, t, inv_steps, pair.condition, inv_guidance, sched,
                                               renoise_iters);
        const auto tau = g.axpby(inv_sd, x, -std::sqrt(ab) * inv_sd, g.constant(x0));
        return detail::score_on_graph(g, model, ref, x, tau, t, pair.condition);
    };
    const auto s_w = side(pair.x_w);
    const auto s_l = side(pair.x_l);
    return detail::finish_pair_loss(std::move(g), s_w, s_l, t, pair.label->coefficient, beta);
}

struct SmoothedDpoValues {
    double direct = 0.0;
    double reduced = 0.0;
};

/// Per-pair smoothed DPO loss on abstract log-likelihoods, two ways:
///  direct  - substitute the weighted-average densities
///            log p~(w) = alpha log p(w) + (gamma - alpha) log p(l)
///            log p~(l) = (gamma - alpha) log p(w) + alpha log p(l)
///            (normalizers dropped) into the DPO loss;
///  reduced - scale the plain DPO margin by (2 alpha - gamma).
inline SmoothedDpoValues smoothed_dpo_scalar(double logp_w_theta, double logp_l_theta, double logp_w_ref,
                                             double logp_l_ref, double alpha, double gamma, double beta) {
    const double rest = gamma - alpha;
    const double smooth_w_theta = alpha * logp_w_theta + rest * logp_l_theta;
    const double smooth_l_theta = rest * logp_w_theta + alpha * logp_l_theta;
    const double smooth_w_ref = alpha * logp_w_ref + rest * logp_l_ref;
    const double smooth_l_ref = rest * logp_w_ref + alpha * logp_l_ref;
    const double direct_margin = beta * (smooth_w_theta - smooth_w_ref) - beta * (smooth_l_theta - smooth_l_ref);

    const double reduced_margin =
        (2.0 * alpha - gamma) * beta * ((logp_w_theta - logp_w_ref) - (logp_l_theta - logp_l_ref));
    return {neg_log_sigmoid(direct_margin), neg_log_sigmoid(reduced_margin)};
}

}  // namespace smpo
