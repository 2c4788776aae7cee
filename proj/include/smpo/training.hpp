#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <chrono>
#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "smpo/autodiff.hpp"
#include "smpo/denoiser.hpp"
#include "smpo/diffusion.hpp"
#include "smpo/errors.hpp"
#include "smpo/numerics.hpp"
#include "smpo/objectives.hpp"
#include "smpo/optim.hpp"
#include "smpo/preference.hpp"

namespace smpo {

enum class Method { sft, dpo, smpo };

inline std::string to_string(Method m) {
    switch (m) {
        case Method::sft:
            return "sft";
        case Method::dpo:
            return "dpo";
        case Method::smpo:
            return "smpo";
    }
    return "smpo";
}

inline Method method_from_string(std::string_view s) {
    if (s == "sft") return Method::sft;
    if (s == "dpo") return Method::dpo;
    if (s == "smpo") return Method::smpo;
    throw ConfigError("unknown method: " + std::string(s));
}

struct TrainConfig {
    Method method = Method::smpo;
    double beta = 2000.0;
    double gamma = 10.0;
    int inv_steps = 9;
    double inv_guidance = 1.0;
    int renoise_iters = 1;
    bool detach_inversion = true;

    // schedule
    int T = 50;
    ScheduleKind schedule = ScheduleKind::linear_beta;
    double beta_min = 1e-4;
    double beta_max = 0.02;
    bool scale_betas = true;  // beta range is quoted for 1000 steps; rescale by 1000 / T
    int sample_steps = 50;

    // optimizer
    double lr = 1e-4;
    bool lr_beta_scaling = false;  // lr * 2000 / beta
    bool lr_cosine_decay = false;  // decay to zero after warm-up
    double weight_decay = 0.0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    int warmup_steps = 100;
    int batch_pairs = 16;  // samples per micro-batch when pretraining
    int grad_accum = 1;
    std::int64_t total_steps = 2000;

    // reference pretraining
    std::size_t hidden_dim = 64;
    std::size_t depth = 3;
    std::size_t t_embed_dim = 16;
    Activation activation = Activation::silu;
    double cond_dropout = 0.1;

    std::uint64_t seed = 0;
    int workers = 1;
    bool strict = true;  // single-threaded, wall_ms written as 0
    std::int64_t checkpoint_every = 0;

    static TrainConfig pretrain_defaults() {
        TrainConfig c;
        c.method = Method::sft;
        c.lr = 2e-3;
        c.warmup_steps = 200;
        c.batch_pairs = 128;
        c.total_steps = 6000;
        c.lr_cosine_decay = true;
        return c;
    }

    void validate() const {
        auto fail = [](const std::string& msg) { throw ConfigError("config: " + msg); };
        if (!(beta > 0.0)) fail("beta must be > 0");
        if (!(gamma > 0.0)) fail("gamma must be > 0");
        if (inv_steps < 1 || inv_steps > T) fail("inv_steps must lie in [1, T]");
        if (renoise_iters < 0) fail("renoise_iters must be >= 0");
        if (T < 2) fail("T must be >= 2");
        if (sample_steps < 1) fail("sample_steps must be >= 1");
        if (!(lr > 0.0)) fail("lr must be > 0");
        if (weight_decay < 0.0) fail("weight_decay must be >= 0");
        if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
            fail("adam betas must lie in [0, 1)");
        }
        if (!(adam_eps > 0.0)) fail("adam_eps must be > 0");
        if (warmup_steps < 0) fail("warmup_steps must be >= 0");
        if (batch_pairs < 1) fail("batch_pairs must be >= 1");
        if (grad_accum < 1) fail("grad_accum must be >= 1");
        if (total_steps < 0) fail("total_steps must be >= 0");
        if (hidden_dim < 1 || depth < 1) fail("hidden_dim and depth must be >= 1");
        if (t_embed_dim < 2 || t_embed_dim % 2 != 0) fail("t_embed_dim must be even and >= 2");
        if (cond_dropout < 0.0 || cond_dropout >= 1.0) fail("cond_dropout must lie in [0, 1)");
        if (workers < 1) fail("workers must be >= 1");
        if (checkpoint_every < 0) fail("checkpoint_every must be >= 0");
    }

    NoiseSchedule make_noise_schedule() const {
        double k = 1.0;
        if (scale_betas) k = std::min({1000.0 / T, 0.01 / beta_min, 0.999 / beta_max});
        try {
            return make_schedule(T, schedule, k * beta_min, k * beta_max);
        } catch (const InvalidRangeError& e) {
            throw ConfigError(std::string("config: ") + e.what());
        }
    }

    DenoiserArch make_arch(std::size_t data_dim, std::size_t cond_dim) const {
        DenoiserArch a;
        a.data_dim = data_dim;
        a.cond_dim = cond_dim;
        a.hidden_dim = hidden_dim;
        a.depth = depth;
        a.t_embed_dim = t_embed_dim;
        a.max_timestep = T;
        a.activation = activation;
        return a;
    }

    int effective_workers() const noexcept { return strict ? 1 : workers; }
};

/// One row per optimizer step.
struct MetricsRow {
    std::int64_t step = 0;
    double loss = 0.0;
    double mean_margin = 0.0;
    double mean_coefficient = 0.0;
    double grad_norm = 0.0;
    double lr = 0.0;
    double wall_ms = 0.0;
};

inline std::string metrics_csv_header() { return "step,loss,mean_margin,mean_coefficient,grad_norm,lr,wall_ms"; }

inline std::string metrics_csv_row(const MetricsRow& r) {
    return std::to_string(r.step) + "," + format_real(r.loss) + "," + format_real(r.mean_margin) + "," +
           format_real(r.mean_coefficient) + "," + format_real(r.grad_norm) + "," + format_real(r.lr) + "," +
           format_real(r.wall_ms);
}

inline std::string metrics_csv(const std::vector<MetricsRow>& rows) {
    std::string out = metrics_csv_header() + "\n";
    for (const auto& r : rows) out += metrics_csv_row(r) + "\n";
    return out;
}

struct TrainResult {
    DenoiserModel model;
    AdamState optimizer;
    std::vector<MetricsRow> metrics;
};

using CheckpointHook = std::function<void(std::int64_t step, const DenoiserModel&, const AdamState&)>;

namespace detail {

/// Runs fn(i) for i in [0, n). Work is split by index, so results written to
/// per-index slots are independent of the worker count.
template <class Fn>
void parallel_for(std::size_t n, int workers, Fn&& fn) {
    if (workers <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    const auto count = std::min<std::size_t>(static_cast<std::size_t>(workers), n);
    for (std::size_t w = 0; w < count; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!error) error = std::current_exception();
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

inline constexpr std::size_t kChunk = 8;

struct ItemStats {
    double loss = 0.0;
    double margin = 0.0;
    double coefficient = 0.0;
};

/// Generic optimizer loop. `draw(rng)` samples the randomness of one item
/// (run sequentially, in item order); `item_loss(draw)` builds its loss graph.
template <class Draw, class DrawFn, class LossFn>
TrainResult run_training(DenoiserModel model, const TrainConfig& cfg, double base_lr, DrawFn&& draw,
                         LossFn&& item_loss, const CheckpointHook& hook) {
    TrainResult result;
    result.optimizer = AdamState{};
    SeededRng rng(cfg.seed);
    const AdamConfig adam{cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay};
    const auto micro = static_cast<std::size_t>(cfg.batch_pairs);
    const auto n_items = micro * static_cast<std::size_t>(cfg.grad_accum);
    const double inv_items = 1.0 / static_cast<double>(n_items);

    for (std::int64_t step = 1; step <= cfg.total_steps; ++step) {
        const auto started = std::chrono::steady_clock::now();
        std::vector<Draw> draws;
        draws.reserve(n_items);
        for (std::size_t i = 0; i < n_items; ++i) draws.push_back(draw(rng));

        std::vector<ItemStats> stats(n_items);
        GradientBundle total(model);
        for (int a = 0; a < cfg.grad_accum; ++a) {
            const std::size_t begin = static_cast<std::size_t>(a) * micro;
            const std::size_t n_chunks = (micro + kChunk - 1) / kChunk;
            std::vector<GradientBundle> partial(n_chunks, GradientBundle(model));
            parallel_for(n_chunks, cfg.effective_workers(), [&](std::size_t ci) {
                const std::size_t lo = begin + ci * kChunk;
                const std::size_t hi = std::min(begin + micro, lo + kChunk);
                for (std::size_t i = lo; i < hi; ++i) {
                    auto [graph, item] = item_loss(model, draws[i]);
                    graph.backward_into(model, partial[ci]);
                    stats[i] = item;
                }
            });
            GradientBundle micro_sum(model);
            for (const auto& p : partial) micro_sum += p;
            micro_sum *= inv_items;
            total += micro_sum;
        }

        MetricsRow row;
        row.step = step;
        for (const auto& s : stats) {
            row.loss += s.loss;
            row.mean_margin += s.margin;
            row.mean_coefficient += s.coefficient;
        }
        row.loss *= inv_items;
        row.mean_margin *= inv_items;
        row.mean_coefficient *= inv_items;
        row.grad_norm = total.norm();
        if (!std::isfinite(row.loss) || !total.all_finite()) {
            throw DivergenceError("training diverged at step " + std::to_string(step) + " (non-finite loss or gradient)");
        }
        row.lr = cfg.lr_cosine_decay ? warmup_cosine_lr(base_lr, step, cfg.warmup_steps, cfg.total_steps)
                                     : warmup_lr(base_lr, step, cfg.warmup_steps);
        adam_step(model.params(), total.grads, result.optimizer, row.lr, adam);
        for (double p : model.params()) {
            if (!std::isfinite(p)) throw DivergenceError("training diverged at step " + std::to_string(step) + " (non-finite parameter)");
        }
        if (!cfg.strict) {
            row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
        }
        result.metrics.push_back(row);
        if (hook && cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != cfg.total_steps) {
            hook(step, model, result.optimizer);
        }
    }
    if (hook) hook(cfg.total_steps, model, result.optimizer);
    result.model = std::move(model);
    return result;
}

}  // namespace detail

/// Trains the reference denoiser with the plain noise-prediction loss on
/// every sample in the dataset (winners and losers alike), dropping the
/// condition with probability cond_dropout so guidance has an unconditional
/// branch. batch_pairs counts samples here.
inline TrainResult pretrain_reference(const Dataset& data, const TrainConfig& cfg, const CheckpointHook& hook = {}) {
    cfg.validate();
    if (data.pairs.empty()) throw InvalidRangeError("pretrain_reference: dataset is empty");
    const auto sched = cfg.make_noise_schedule();
    const std::size_t data_dim = data.pairs.front().x_w.dim();
    const std::size_t cond_dim = data.pairs.front().condition.dim();
    SeededRng init_rng = SeededRng(cfg.seed).child(1);
    DenoiserModel model(cfg.make_arch(data_dim, cond_dim), init_rng);

    struct Draw {
        std::size_t pair;
        bool loser;
        bool drop_condition;
        int t;
        Vector eps;
    };
    const auto n_pairs = static_cast<std::int64_t>(data.pairs.size());
    auto draw = [&](SeededRng& rng) {
        Draw d;
        d.pair = static_cast<std::size_t>(rng.uniform_int(0, n_pairs - 1));
        d.loser = rng.uniform() < 0.5;
        d.drop_condition = rng.uniform() < cfg.cond_dropout;
        d.t = static_cast<int>(rng.uniform_int(1, sched.T));
        d.eps = gaussian(rng, data_dim);
        return d;
    };
    auto item_loss = [&](const DenoiserModel& m, const Draw& d) {
        const auto& p = data.pairs[d.pair];
        const Vector& c = d.drop_condition ? m.null_condition() : p.condition;
        auto g = diffusion_loss(m, d.loser ? p.x_l : p.x_w, c, d.t, d.eps, sched);
        const double loss = g.loss();
        return std::pair{std::move(g), detail::ItemStats{loss, 0.0, 0.0}};
    };
    return detail::run_training<Draw>(std::move(model), cfg, cfg.lr, draw, item_loss, hook);
}

/// Preference fine-tuning of a copy of `ref`; `ref` itself is never modified.
///   sft  - noise-prediction loss on winners only
///   dpo  - forward-noised latents, hard labels (coefficient 1)
///   smpo - latents from ReNoise inversion under the current model, smoothed
///          labels with gamma taken from the config
inline TrainResult finetune(const DenoiserModel& ref, const Dataset& data, const TrainConfig& cfg,
                            const CheckpointHook& hook = {}) {
    cfg.validate();
    if (data.pairs.empty()) throw InvalidRangeError("finetune: dataset is empty");
    if (cfg.method == Method::smpo && !data.labeled()) {
        throw MissingLabelError("finetune: smpo requires a labeled dataset (run label first)");
    }
    const auto sched = cfg.make_noise_schedule();
    if (ref.arch().max_timestep != sched.T) throw ArchitectureMismatchError("finetune: reference was trained with a different T");
    const std::size_t data_dim = ref.arch().data_dim;
    const double base_lr = cfg.lr_beta_scaling ? cfg.lr * 2000.0 / cfg.beta : cfg.lr;

    std::vector<PreferencePair> pairs = data.pairs;
    if (cfg.method == Method::smpo) {
        for (auto& p : pairs) p.label = p.label->with_gamma(cfg.gamma);
    }

    struct Draw {
        std::size_t pair;
        int t;
        Vector eps;
    };
    const auto n_pairs = static_cast<std::int64_t>(pairs.size());
    auto draw = [&](SeededRng& rng) {
        Draw d;
        d.pair = static_cast<std::size_t>(rng.uniform_int(0, n_pairs - 1));
        d.t = static_cast<int>(rng.uniform_int(1, sched.T));
        d.eps = gaussian(rng, data_dim);
        return d;
    };
    auto item_loss = [&](const DenoiserModel& m, const Draw& d) -> std::pair<LossGraph, detail::ItemStats> {
        const auto& p = pairs[d.pair];
        switch (cfg.method) {
            case Method::sft: {
                auto g = diffusion_loss(m, p.x_w, p.condition, d.t, d.eps, sched);
                const double loss = g.loss();
                return {std::move(g), {loss, 0.0, 0.0}};
            }
            case Method::dpo: {
                // one t and one noise draw shared by winner and loser
                auto pl = dpo_loss(m, ref, p, d.t, d.eps, d.eps, cfg.beta, sched);
                return {std::move(pl.graph), {pl.breakdown.loss, pl.breakdown.margin, pl.breakdown.coefficient}};
            }
            case Method::smpo: {
                PairLoss pl;
                if (cfg.detach_inversion) {
                    const auto inv_w = renoise_invert(m, p.x_w, d.t, cfg.inv_steps, p.condition, cfg.inv_guidance, sched,
                                                      cfg.renoise_iters);
                    const auto inv_l = renoise_invert(m, p.x_l, d.t, cfg.inv_steps, p.condition, cfg.inv_guidance, sched,
                                                      cfg.renoise_iters);
                    pl = smpo_loss(m, ref, p, d.t, inv_w, inv_l, cfg.beta, sched);
                } else {
                    pl = smpo_loss_through_inversion(m, ref, p, d.t, cfg.inv_steps, cfg.inv_guidance, cfg.beta, sched,
                                                     cfg.renoise_iters);
                }
                return {std::move(pl.graph), {pl.breakdown.loss, pl.breakdown.margin, pl.breakdown.coefficient}};
            }
        }
        throw ConfigError("finetune: unknown method");
    };
    return detail::run_training<Draw>(ref, cfg, base_lr, draw, item_loss, hook);
}

}  // namespace smpo
