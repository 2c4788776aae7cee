#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "smpo/errors.hpp"
#include "smpo/numerics.hpp"

namespace smpo {

enum class RewardKind { target_distance, axis_projection, custom };

/// Synthetic ground-truth reward r(x0, c); higher is better.
///   target_distance:  -||x0 - c||^2
///   axis_projection:  <x0 - c, axis>
///   custom:           user callable
/// Every kind is followed by the affine map scale * r + shift.
struct RewardFunction {
    RewardKind kind = RewardKind::target_distance;
    Vector axis;
    double scale = 1.0;
    double shift = 0.0;
    std::string custom_name;
    std::function<double(const Vector&, const Vector&)> custom_fn;

    static RewardFunction target_distance() { return {}; }

    static RewardFunction axis_projection(Vector axis) {
        RewardFunction r;
        r.kind = RewardKind::axis_projection;
        r.axis = std::move(axis);
        return r;
    }

    static RewardFunction custom(std::string name, std::function<double(const Vector&, const Vector&)> fn) {
        RewardFunction r;
        r.kind = RewardKind::custom;
        r.custom_name = std::move(name);
        r.custom_fn = std::move(fn);
        return r;
    }

    RewardFunction affine(double a, double b) const {
        RewardFunction r = *this;
        r.scale = a * scale;
        r.shift = a * shift + b;
        return r;
    }

    std::string name() const {
        switch (kind) {
            case RewardKind::target_distance:
                return "target_distance";
            case RewardKind::axis_projection:
                return "axis_projection";
            case RewardKind::custom:
                return custom_name.empty() ? "custom" : custom_name;
        }
        return "custom";
    }
};

inline RewardFunction reward_from_string(std::string_view s) {
    if (s == "target_distance") return RewardFunction::target_distance();
    if (s == "axis_projection") return RewardFunction::axis_projection(Vector{1.0, 0.0});
    throw ConfigError("unknown reward kind: " + std::string(s));
}

inline double score(const RewardFunction& reward, const Vector& x0, const Vector& c) {
    double base = 0.0;
    switch (reward.kind) {
        case RewardKind::target_distance:
            base = -squared_distance(x0, c);
            break;
        case RewardKind::axis_projection: {
            require_same_dim(x0, reward.axis, "axis_projection reward");
            base = dot(x0 - c, reward.axis);
            break;
        }
        case RewardKind::custom:
            if (!reward.custom_fn) throw ConfigError("custom reward has no callable");
            base = reward.custom_fn(x0, c);
            break;
    }
    if (reward.scale == 1.0 && reward.shift == 0.0) return base;
    return reward.scale * base + reward.shift;
}

/// Bradley-Terry preference probability sigma(r_w - r_l).
inline double bt_prob(double r_w, double r_l) noexcept { return sigmoid(r_w - r_l); }

/// Dataset-wide extrema of all winner and loser scores.
struct RewardStats {
    double max = 0.0;
    double min = 0.0;
    std::int64_t count = 0;

    bool degenerate() const noexcept { return !(max > min); }
};

inline RewardStats compute_reward_stats(std::span<const double> scores) {
    if (scores.size() < 2) throw InvalidRangeError("reward stats need at least two scores");
    const auto [lo, hi] = std::minmax_element(scores.begin(), scores.end());
    return RewardStats{*hi, *lo, static_cast<std::int64_t>(scores.size())};
}

/// r' = (r - max) / (max - min), mapping the dataset range onto [-1, 0].
inline double normalize_reward(double r, const RewardStats& stats) {
    if (stats.degenerate()) throw DegenerateStatsError("reward normalization undefined when max == min");
    return (r - stats.max) / (stats.max - stats.min);
}

inline std::vector<double> normalize_rewards(std::span<const double> scores, const RewardStats& stats) {
    if (stats.degenerate()) throw DegenerateStatsError("reward normalization undefined when max == min");
    std::vector<double> out;
    out.reserve(scores.size());
    for (double r : scores) out.push_back(normalize_reward(r, stats));
    return out;
}

/// alpha / gamma = softmax weight of the winner among the normalized pair.
inline double weight_ratio(double r_w_norm, double r_l_norm) noexcept {
    // exp(a) / (exp(a) + exp(b)) == sigmoid(a - b)
    return sigmoid(r_w_norm - r_l_norm);
}

/// Smoothed preference label. alpha = ratio * gamma, and the loss is scaled
/// by the coefficient 2 alpha - gamma = (2 ratio - 1) gamma.
struct SmoothedLabel {
    double ratio = 0.5;
    double gamma = 1.0;
    double coefficient = 0.0;

    static SmoothedLabel make(double ratio, double gamma) {
        if (!(ratio >= 0.0 && ratio <= 1.0)) throw InvalidRangeError("smoothed label ratio must lie in [0, 1]");
        if (!(gamma > 0.0)) throw InvalidRangeError("smoothed label gamma must be > 0");
        return SmoothedLabel{ratio, gamma, (2.0 * ratio - 1.0) * gamma};
    }

    /// alpha = gamma = 1: the hard winner/loser label of plain DPO.
    static SmoothedLabel binary() { return make(1.0, 1.0); }

    double alpha() const noexcept { return ratio * gamma; }

    SmoothedLabel with_gamma(double g) const { return make(ratio, g); }

    SmoothedLabel swapped() const { return make(1.0 - ratio, gamma); }
};

inline SmoothedLabel label_from_rewards(double r_w, double r_l, const RewardStats& stats, double gamma) {
    if (stats.degenerate()) return SmoothedLabel::make(0.5, gamma);
    return SmoothedLabel::make(weight_ratio(normalize_reward(r_w, stats), normalize_reward(r_l, stats)), gamma);
}

struct PreferencePair {
    std::string id;
    Vector condition;
    Vector x_w;
    Vector x_l;
    std::optional<double> reward_w;
    std::optional<double> reward_l;
    std::optional<SmoothedLabel> label;
};

struct DatasetHeader {
    int schema_version = 1;
    std::optional<RewardStats> reward_stats;
    std::string reward_kind;
    std::uint64_t seed = 0;
};

struct Dataset {
    DatasetHeader header;
    std::vector<PreferencePair> pairs;

    bool labeled() const noexcept {
        return !pairs.empty() && std::all_of(pairs.begin(), pairs.end(), [](const auto& p) { return p.label.has_value(); });
    }
};

/// Scores every pair, orders each so the higher-scoring sample is the
/// winner, pools all 2N scores into dataset stats and attaches a smoothed
/// label. Equal-score datasets (max == min) get ratio 0.5 everywhere; check
/// header.reward_stats->degenerate() to surface that.
inline Dataset label_dataset(const Dataset& in, const RewardFunction& reward, double gamma) {
    if (!(gamma > 0.0)) throw InvalidRangeError("label_dataset: gamma must be > 0");
    if (in.pairs.empty()) throw InvalidRangeError("label_dataset: dataset is empty");
    Dataset out = in;
    std::vector<double> pooled;
    pooled.reserve(2 * out.pairs.size());
    for (auto& p : out.pairs) {
        double rw = score(reward, p.x_w, p.condition);
        double rl = score(reward, p.x_l, p.condition);
        if (rw < rl) {
            std::swap(p.x_w, p.x_l);
            std::swap(rw, rl);
        }
        p.reward_w = rw;
        p.reward_l = rl;
        pooled.push_back(rw);
        pooled.push_back(rl);
    }
    const RewardStats stats = compute_reward_stats(pooled);
    for (auto& p : out.pairs) p.label = label_from_rewards(*p.reward_w, *p.reward_l, stats, gamma);
    out.header.reward_stats = stats;
    out.header.reward_kind = reward.name();
    return out;
}

/// True when the stored label is what the stored rewards and header stats produce.
inline bool label_is_consistent(const PreferencePair& p, const RewardStats& stats, double tol = 1e-12) {
    if (!p.label || !p.reward_w || !p.reward_l) return false;
    const auto expected = label_from_rewards(*p.reward_w, *p.reward_l, stats, p.label->gamma);
    return std::abs(expected.ratio - p.label->ratio) <= tol;
}

}  // namespace smpo
