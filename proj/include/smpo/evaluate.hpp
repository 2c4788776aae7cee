#pragma once

#include <cstdint>
#include <span>
#include <string>

#include <json.hpp>

#include "smpo/denoiser.hpp"
#include "smpo/diffusion.hpp"
#include "smpo/errors.hpp"
#include "smpo/numerics.hpp"
#include "smpo/preference.hpp"

namespace smpo {

struct EvalConfig {
    std::int64_t n_prompts = 1000;
    int sample_steps = 50;
    double guidance = 1.0;
    std::uint64_t seed = 0;
};

struct EvalReport {
    double mean_reward_model = 0.0;
    double mean_reward_ref = 0.0;
    double win_rate = 0.0;  // ties count one half
    std::int64_t n_prompts = 0;
    std::uint64_t seed = 0;
};

inline nlohmann::json eval_report_to_json(const EvalReport& r) {
    return {{"mean_reward_model", r.mean_reward_model},
            {"mean_reward_ref", r.mean_reward_ref},
            {"win_rate", r.win_rate},
            {"n_prompts", r.n_prompts},
            {"seed", r.seed}};
}

/// Head-to-head under a reward: prompt i uses condition prompts[i % size] and
/// one x_T draw shared by both models, so the comparison isolates the models.
template <NoisePredictor M, NoisePredictor R>
EvalReport evaluate(const M& model, const R& ref, const RewardFunction& reward, std::span<const Vector> prompts,
                    std::size_t data_dim, const EvalConfig& cfg, const NoiseSchedule& sched) {
    if (prompts.empty()) throw InvalidRangeError("evaluate: no prompts");
    if (cfg.n_prompts < 1) throw InvalidRangeError("evaluate: n_prompts must be >= 1");
    SeededRng rng(cfg.seed);
    double sum_model = 0.0, sum_ref = 0.0, wins = 0.0;
    for (std::int64_t i = 0; i < cfg.n_prompts; ++i) {
        const Vector& c = prompts[static_cast<std::size_t>(i) % prompts.size()];
        const Vector x_T = gaussian(rng, data_dim);
        const double r_model = score(reward, ddim_sample(model, x_T, c, cfg.sample_steps, cfg.guidance, sched), c);
        const double r_ref = score(reward, ddim_sample(ref, x_T, c, cfg.sample_steps, cfg.guidance, sched), c);
        sum_model += r_model;
        sum_ref += r_ref;
        if (r_model > r_ref) {
            wins += 1.0;
        } else if (r_model == r_ref) {
            wins += 0.5;
        }
    }
    const auto n = static_cast<double>(cfg.n_prompts);
    return EvalReport{sum_model / n, sum_ref / n, wins / n, cfg.n_prompts, cfg.seed};
}

}  // namespace smpo
