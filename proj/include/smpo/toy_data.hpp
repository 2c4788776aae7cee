#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <string>
#include <vector>

#include "smpo/errors.hpp"
#include "smpo/numerics.hpp"
#include "smpo/preference.hpp"

namespace smpo {

enum class ToyKind { gmm2d, ring };

inline std::string to_string(ToyKind k) { return k == ToyKind::gmm2d ? "gmm2d" : "ring"; }

inline ToyKind toy_kind_from_string(std::string_view s) {
    if (s == "gmm2d") return ToyKind::gmm2d;
    if (s == "ring") return ToyKind::ring;
    throw ConfigError("unknown toy data kind: " + std::string(s));
}

/// A conditional 2-D task: each condition is the target point its samples
/// scatter around. Candidates come from a two-level isotropic Gaussian
/// ("careful" and "sloppy" generations) centred on the target.
struct ToyTask {
    ToyKind kind = ToyKind::gmm2d;
    std::vector<Vector> conditions;
    double sigma_low = 0.2;
    double sigma_high = 0.5;
};

inline ToyTask make_toy_task(ToyKind kind) {
    ToyTask task;
    task.kind = kind;
    if (kind == ToyKind::gmm2d) {
        task.conditions = {Vector{1.5, 1.5}, Vector{-1.5, 1.5}, Vector{-1.5, -1.5}, Vector{1.5, -1.5}};
    } else {
        for (int i = 0; i < 8; ++i) {
            const double a = 2.0 * std::numbers::pi * i / 8.0;
            task.conditions.push_back(Vector{2.0 * std::cos(a), 2.0 * std::sin(a)});
        }
    }
    return task;
}

/// Unlabeled pairs; x_w holds the low-noise candidate, x_l the high-noise one.
/// Which one actually wins is decided later by label_dataset.
inline Dataset gen_toy_data(const ToyTask& task, std::int64_t n_pairs, std::uint64_t seed) {
    if (n_pairs < 1) throw InvalidRangeError("gen_toy_data: n_pairs must be >= 1");
    SeededRng rng(seed);
    Dataset d;
    d.header.seed = seed;
    d.header.reward_kind = "";
    d.pairs.reserve(static_cast<std::size_t>(n_pairs));
    const auto n_cond = static_cast<std::int64_t>(task.conditions.size());
    for (std::int64_t i = 0; i < n_pairs; ++i) {
        PreferencePair p;
        char id[24];
        std::snprintf(id, sizeof id, "p%07lld", static_cast<long long>(i));
        p.id = id;
        p.condition = task.conditions[static_cast<std::size_t>(rng.uniform_int(0, n_cond - 1))];
        p.x_w = p.condition + task.sigma_low * gaussian(rng, p.condition.dim());
        p.x_l = p.condition + task.sigma_high * gaussian(rng, p.condition.dim());
        d.pairs.push_back(std::move(p));
    }
    return d;
}

inline Dataset gen_toy_data(ToyKind kind, std::int64_t n_pairs, std::uint64_t seed) {
    return gen_toy_data(make_toy_task(kind), n_pairs, seed);
}

}  // namespace smpo
