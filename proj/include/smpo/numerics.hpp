#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "smpo/errors.hpp"

namespace smpo {

// ---------------------------------------------------------------------------
// Vector
// ---------------------------------------------------------------------------

/// Dense real vector used for samples, latents, noise and conditions.
class Vector {
public:
    Vector() = default;
    explicit Vector(std::size_t dim, double fill = 0.0) : data_(dim, fill) {}
    Vector(std::initializer_list<double> values) : data_(values) {}
    explicit Vector(std::vector<double> values) : data_(std::move(values)) {}
    explicit Vector(std::span<const double> values) : data_(values.begin(), values.end()) {}

    std::size_t dim() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }

    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }
    const std::vector<double>& raw() const noexcept { return data_; }

    auto begin() noexcept { return data_.begin(); }
    auto end() noexcept { return data_.end(); }
    auto begin() const noexcept { return data_.begin(); }
    auto end() const noexcept { return data_.end(); }

    bool all_finite() const noexcept {
        for (double v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    Vector& operator+=(const Vector& o) {
        check_same_dim(o);
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }
    Vector& operator-=(const Vector& o) {
        check_same_dim(o);
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
        return *this;
    }
    Vector& operator*=(double s) noexcept {
        for (double& v : data_) v *= s;
        return *this;
    }

    friend Vector operator+(Vector a, const Vector& b) { return a += b; }
    friend Vector operator-(Vector a, const Vector& b) { return a -= b; }
    friend Vector operator*(double s, Vector a) { return a *= s; }
    friend Vector operator*(Vector a, double s) { return a *= s; }
    friend bool operator==(const Vector&, const Vector&) = default;

private:
    void check_same_dim(const Vector& o) const {
        if (o.dim() != dim()) {
            throw DimensionMismatchError("vector dimensions differ: " + std::to_string(dim()) + " vs " +
                                         std::to_string(o.dim()));
        }
    }

    std::vector<double> data_;
};

inline void require_same_dim(const Vector& a, const Vector& b, std::string_view what) {
    if (a.dim() != b.dim()) {
        throw DimensionMismatchError(std::string(what) + ": dimension " + std::to_string(a.dim()) + " vs " +
                                     std::to_string(b.dim()));
    }
}

/// a*x + b*y
inline Vector axpby(double a, const Vector& x, double b, const Vector& y) {
    require_same_dim(x, y, "axpby");
    Vector out(x.dim());
    for (std::size_t i = 0; i < x.dim(); ++i) out[i] = a * x[i] + b * y[i];
    return out;
}

inline double dot(const Vector& a, const Vector& b) {
    require_same_dim(a, b, "dot");
    double s = 0.0;
    for (std::size_t i = 0; i < a.dim(); ++i) s += a[i] * b[i];
    return s;
}

inline double squared_norm(const Vector& a) noexcept {
    double s = 0.0;
    for (double v : a) s += v * v;
    return s;
}

inline double norm(const Vector& a) noexcept { return std::sqrt(squared_norm(a)); }

inline double squared_distance(const Vector& a, const Vector& b) {
    require_same_dim(a, b, "squared_distance");
    double s = 0.0;
    for (std::size_t i = 0; i < a.dim(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

inline double distance(const Vector& a, const Vector& b) { return std::sqrt(squared_distance(a, b)); }

// ---------------------------------------------------------------------------
// SeededRng
// ---------------------------------------------------------------------------

namespace detail {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

constexpr std::uint64_t splitmix_finalize(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

}  // namespace detail

/// Counter-based generator: draw i is a pure function of (key, i), so the
/// sequence is reproducible bit-for-bit and child streams never overlap in
/// practice. Not shareable between threads; derive a child per worker.
class SeededRng {
public:
    explicit SeededRng(std::uint64_t seed = 0) noexcept
        : seed_(seed), key_(detail::splitmix_finalize(seed + detail::kGolden)) {}

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t counter() const noexcept { return counter_; }

    std::uint64_t next_u64() noexcept {
        ++counter_;
        return detail::splitmix_finalize(key_ + counter_ * detail::kGolden);
    }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [lo, hi] (inclusive). Multiply-shift, bias < 2^-32 for small ranges.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) noexcept {
        const auto span = static_cast<unsigned __int128>(hi - lo + 1);
        const auto r = static_cast<unsigned __int128>(next_u64());
        return lo + static_cast<std::int64_t>((r * span) >> 64);
    }

    /// Standard normal via Box-Muller; consumes two draws, returns the cosine branch.
    double normal() noexcept {
        double a = 0.0, b = 0.0;
        normal_pair(a, b);
        return a;
    }

    void normal_pair(double& a, double& b) noexcept {
        // (0, 1] so the log is finite
        const double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        a = r * std::cos(theta);
        b = r * std::sin(theta);
    }

    /// Independent stream keyed by (seed, stream_id).
    SeededRng child(std::uint64_t stream_id) const noexcept {
        SeededRng c(seed_);
        c.key_ = detail::splitmix_finalize(key_ ^ detail::splitmix_finalize(stream_id * detail::kGolden + 0x632BE59BD9B4E019ULL));
        return c;
    }

private:
    std::uint64_t seed_;
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

/// i.i.d. standard normal vector of the given dimension.
inline Vector gaussian(SeededRng& rng, std::size_t dim) {
    if (dim == 0) throw InvalidRangeError("gaussian: dim must be >= 1");
    Vector out(dim);
    std::size_t i = 0;
    for (; i + 1 < dim; i += 2) rng.normal_pair(out[i], out[i + 1]);
    if (i < dim) out[i] = rng.normal();
    return out;
}

// ---------------------------------------------------------------------------
// NoiseSchedule
// ---------------------------------------------------------------------------

enum class ScheduleKind { linear_beta, cosine };

inline std::string to_string(ScheduleKind k) { return k == ScheduleKind::linear_beta ? "linear_beta" : "cosine"; }

inline ScheduleKind schedule_kind_from_string(std::string_view s) {
    if (s == "linear_beta" || s == "linear") return ScheduleKind::linear_beta;
    if (s == "cosine") return ScheduleKind::cosine;
    throw ConfigError("unknown schedule kind: " + std::string(s));
}

/// Discrete variance-preserving schedule. Arrays are indexed by step - 1,
/// i.e. alpha[0] is the retention factor of step t = 1.
struct NoiseSchedule {
    int T = 0;
    ScheduleKind kind = ScheduleKind::linear_beta;
    double beta_min = 0.0;
    double beta_max = 0.0;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;
    std::vector<double> lambda_w;

    /// Cumulative retention at step t in [0, T]; t = 0 is the clean-data limit (1).
    double alpha_bar_at(int t) const {
        if (t < 0 || t > T) throw InvalidRangeError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(T) + "]");
        return t == 0 ? 1.0 : alpha_bar[static_cast<std::size_t>(t - 1)];
    }

    double loss_weight(int t) const {
        if (t < 1 || t > T) throw InvalidRangeError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
        return lambda_w[static_cast<std::size_t>(t - 1)];
    }

    void require_step(int t, std::string_view what) const {
        if (t < 1 || t > T) {
            throw InvalidRangeError(std::string(what) + ": timestep " + std::to_string(t) + " outside [1, " +
                                    std::to_string(T) + "]");
        }
    }
};

inline NoiseSchedule make_schedule(int T, ScheduleKind kind = ScheduleKind::linear_beta, double beta_min = 1e-4,
                                   double beta_max = 0.02) {
    if (T < 2) throw InvalidRangeError("make_schedule: T must be >= 2");
    if (!(beta_min > 0.0) || !(beta_min <= beta_max) || !(beta_max < 1.0)) {
        throw InvalidRangeError("make_schedule: require 0 < beta_min <= beta_max < 1");
    }
    NoiseSchedule s;
    s.T = T;
    s.kind = kind;
    s.beta_min = beta_min;
    s.beta_max = beta_max;
    s.alpha.resize(static_cast<std::size_t>(T));
    s.alpha_bar.resize(static_cast<std::size_t>(T));
    s.lambda_w.assign(static_cast<std::size_t>(T), 1.0);

    const double range = beta_max - beta_min;
    double running = 1.0;
    for (int i = 0; i < T; ++i) {
        const double frac = static_cast<double>(i) / static_cast<double>(T - 1);
        double beta = 0.0;
        if (kind == ScheduleKind::linear_beta) {
            beta = beta_min + range * frac;
        } else {
            // half-cosine ramp between the same endpoints
            beta = beta_min + range * 0.5 * (1.0 - std::cos(std::numbers::pi * frac));
        }
        s.alpha[static_cast<std::size_t>(i)] = 1.0 - beta;
        running *= 1.0 - beta;
        s.alpha_bar[static_cast<std::size_t>(i)] = running;
    }
    if (s.alpha_bar.front() < 0.99) {
        throw InvalidRangeError("make_schedule: first cumulative retention must be >= 0.99 (beta_min too large)");
    }
    for (std::size_t i = 1; i < s.alpha_bar.size(); ++i) {
        if (!(s.alpha_bar[i] < s.alpha_bar[i - 1])) {
            throw InvalidRangeError("make_schedule: cumulative retention is not strictly decreasing");
        }
    }
    if (!(s.alpha_bar.back() > 0.0)) throw InvalidRangeError("make_schedule: cumulative retention underflowed");
    return s;
}

// ---------------------------------------------------------------------------
// misc
// ---------------------------------------------------------------------------

/// log(1 + exp(z)) without overflow.
inline double softplus(double z) noexcept { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

/// Logistic sigmoid, stable for large |z|.
inline double sigmoid(double z) noexcept {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

/// FNV-1a, used for config hashes and parameter checksums.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) noexcept {
    for (unsigned char ch : bytes) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a(std::span<const double> values, std::uint64_t h = 0xcbf29ce484222325ULL) noexcept {
    return fnv1a(std::string_view(reinterpret_cast<const char*>(values.data()), values.size_bytes()), h);
}

/// "%.17g" formatting: round-trips every finite double.
inline std::string format_real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace smpo
