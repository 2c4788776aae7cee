#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "smpo/errors.hpp"
#include "smpo/numerics.hpp"

namespace smpo {

/// Anything that predicts the noise in x_t given (t, c). The diffusion and
/// evaluation routines are templated on this so closed-form predictors
/// (zero, linear, oracle) can stand in for the network in tests.
template <class P>
concept NoisePredictor = requires(const P& p, const Vector& x, int t, const Vector& c) {
    { p.predict(x, t, c) } -> std::convertible_to<Vector>;
    { p.null_condition() } -> std::convertible_to<Vector>;
};

enum class Activation { tanh, silu };

inline std::string to_string(Activation a) { return a == Activation::tanh ? "tanh" : "silu"; }

inline Activation activation_from_string(std::string_view s) {
    if (s == "tanh") return Activation::tanh;
    if (s == "silu") return Activation::silu;
    throw ConfigError("unknown activation: " + std::string(s));
}

struct DenoiserArch {
    std::size_t data_dim = 2;
    std::size_t cond_dim = 2;
    std::size_t hidden_dim = 64;
    std::size_t depth = 3;        // number of hidden layers
    std::size_t t_embed_dim = 16; // even
    int max_timestep = 50;
    Activation activation = Activation::silu;

    std::size_t input_dim() const noexcept { return data_dim + cond_dim + t_embed_dim; }

    friend bool operator==(const DenoiserArch&, const DenoiserArch&) = default;

    std::string canonical() const {
        return "data_dim=" + std::to_string(data_dim) + ";cond_dim=" + std::to_string(cond_dim) +
               ";hidden_dim=" + std::to_string(hidden_dim) + ";depth=" + std::to_string(depth) +
               ";t_embed_dim=" + std::to_string(t_embed_dim) + ";max_timestep=" + std::to_string(max_timestep) +
               ";activation=" + to_string(activation);
    }
};

struct LayerShape {
    std::size_t rows = 0;  // outputs
    std::size_t cols = 0;  // inputs
    std::size_t weight_offset = 0;
    std::size_t bias_offset = 0;
};

/// Activations recorded by a forward pass, consumed by backprop.
struct ForwardTrace {
    Vector input;
    std::vector<Vector> pre;   // pre-activation of each hidden layer
    std::vector<Vector> post;  // activation of each hidden layer
    Vector output;
};

/// MLP noise predictor eps(x_t, t, c) over the concatenation
/// [x_t, c, sinusoidal(t)]. Parameters live in one flat array, laid out
/// layer by layer as row-major weights followed by the bias.
class DenoiserModel {
public:
    DenoiserModel() = default;

    /// Glorot-uniform weights, zero biases.
    DenoiserModel(const DenoiserArch& arch, SeededRng& rng) : DenoiserModel(arch) {
        for (const auto& l : layers_) {
            const double bound = std::sqrt(6.0 / static_cast<double>(l.rows + l.cols));
            for (std::size_t i = 0; i < l.rows * l.cols; ++i) params_[l.weight_offset + i] = rng.uniform(-bound, bound);
        }
    }

    static DenoiserModel zeros(const DenoiserArch& arch) { return DenoiserModel(arch); }

    const DenoiserArch& arch() const noexcept { return arch_; }
    const std::vector<LayerShape>& layers() const noexcept { return layers_; }
    std::size_t num_params() const noexcept { return params_.size(); }
    std::span<const double> params() const noexcept { return params_; }
    std::span<double> params() noexcept { return params_; }

    std::span<const double> weights(std::size_t layer) const {
        const auto& l = layers_.at(layer);
        return std::span<const double>(params_).subspan(l.weight_offset, l.rows * l.cols);
    }
    std::span<const double> bias(std::size_t layer) const {
        const auto& l = layers_.at(layer);
        return std::span<const double>(params_).subspan(l.bias_offset, l.rows);
    }

    const Vector& null_condition() const noexcept { return null_condition_; }
    void set_null_condition(Vector c) {
        require_same_dim(c, null_condition_, "null condition");
        null_condition_ = std::move(c);
    }

    std::uint64_t checksum() const noexcept { return fnv1a(std::span<const double>(params_)); }

    bool same_architecture(const DenoiserModel& o) const noexcept { return arch_ == o.arch_; }

    Vector time_embedding(int t) const {
        const std::size_t half = arch_.t_embed_dim / 2;
        Vector e(arch_.t_embed_dim);
        for (std::size_t i = 0; i < half; ++i) {
            const double freq =
                std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(std::max<std::size_t>(half, 1)));
            e[i] = std::sin(static_cast<double>(t) * freq);
            e[half + i] = std::cos(static_cast<double>(t) * freq);
        }
        return e;
    }

    Vector predict(const Vector& x, int t, const Vector& c) const { return run(x, t, c, nullptr); }

    ForwardTrace forward_trace(const Vector& x, int t, const Vector& c) const {
        ForwardTrace tr;
        tr.output = run(x, t, c, &tr);
        return tr;
    }

    /// Vector-Jacobian product of a recorded forward pass. Adds d(out.g)/dparams
    /// into `param_grad` (skipped when empty) and writes d(out.g)/dx_t into
    /// `input_grad` when non-null.
    void backprop(const ForwardTrace& tr, const Vector& out_grad, std::span<double> param_grad,
                  Vector* input_grad) const {
        if (out_grad.dim() != arch_.data_dim) throw DimensionMismatchError("backprop: output gradient dimension");
        if (!param_grad.empty() && param_grad.size() != params_.size()) {
            throw DimensionMismatchError("backprop: parameter gradient size");
        }
        std::vector<double> delta(out_grad.begin(), out_grad.end());
        std::vector<double> upstream;
        for (std::size_t li = layers_.size(); li-- > 0;) {
            const auto& l = layers_[li];
            const Vector& h = li == 0 ? tr.input : tr.post[li - 1];
            const double* w = params_.data() + l.weight_offset;
            if (!param_grad.empty()) {
                double* gw = param_grad.data() + l.weight_offset;
                double* gb = param_grad.data() + l.bias_offset;
                for (std::size_t r = 0; r < l.rows; ++r) {
                    const double d = delta[r];
                    gb[r] += d;
                    double* row = gw + r * l.cols;
                    for (std::size_t k = 0; k < l.cols; ++k) row[k] += d * h[k];
                }
            }
            if (li == 0 && input_grad == nullptr) break;
            upstream.assign(l.cols, 0.0);
            for (std::size_t r = 0; r < l.rows; ++r) {
                const double d = delta[r];
                const double* row = w + r * l.cols;
                for (std::size_t k = 0; k < l.cols; ++k) upstream[k] += row[k] * d;
            }
            if (li == 0) {
                *input_grad = Vector(std::span<const double>(upstream).first(arch_.data_dim));
                break;
            }
            const Vector& z = tr.pre[li - 1];
            delta.resize(l.cols);
            for (std::size_t k = 0; k < l.cols; ++k) delta[k] = upstream[k] * activation_grad(z[k]);
        }
    }

private:
    explicit DenoiserModel(const DenoiserArch& arch) : arch_(arch), null_condition_(arch.cond_dim, 0.0) {
        if (arch.data_dim == 0 || arch.cond_dim == 0 || arch.hidden_dim == 0 || arch.depth == 0) {
            throw InvalidRangeError("denoiser: all dimensions must be positive");
        }
        if (arch.t_embed_dim == 0 || arch.t_embed_dim % 2 != 0) {
            throw InvalidRangeError("denoiser: t_embed_dim must be positive and even");
        }
        if (arch.max_timestep < 1) throw InvalidRangeError("denoiser: max_timestep must be >= 1");
        std::size_t in = arch.input_dim();
        std::size_t offset = 0;
        for (std::size_t i = 0; i <= arch.depth; ++i) {
            const std::size_t out = i == arch.depth ? arch.data_dim : arch.hidden_dim;
            LayerShape l{out, in, offset, offset + out * in};
            offset = l.bias_offset + out;
            layers_.push_back(l);
            in = out;
        }
        params_.assign(offset, 0.0);
    }

    double activation(double z) const noexcept {
        if (arch_.activation == Activation::tanh) return std::tanh(z);
        return z * sigmoid(z);
    }

    double activation_grad(double z) const noexcept {
        if (arch_.activation == Activation::tanh) {
            const double th = std::tanh(z);
            return 1.0 - th * th;
        }
        const double s = sigmoid(z);
        return s * (1.0 + z * (1.0 - s));
    }

    Vector run(const Vector& x, int t, const Vector& c, ForwardTrace* tr) const {
        if (x.dim() != arch_.data_dim) {
            throw DimensionMismatchError("eps_predict: x_t has dimension " + std::to_string(x.dim()) + ", model expects " +
                                         std::to_string(arch_.data_dim));
        }
        if (c.dim() != arch_.cond_dim) {
            throw DimensionMismatchError("eps_predict: condition has dimension " + std::to_string(c.dim()) +
                                         ", model expects " + std::to_string(arch_.cond_dim));
        }
        if (t < 1 || t > arch_.max_timestep) {
            throw InvalidRangeError("eps_predict: timestep " + std::to_string(t) + " outside [1, " +
                                    std::to_string(arch_.max_timestep) + "]");
        }
        Vector h(arch_.input_dim());
        std::size_t k = 0;
        for (double v : x) h[k++] = v;
        for (double v : c) h[k++] = v;
        for (double v : time_embedding(t)) h[k++] = v;
        if (tr) {
            tr->input = h;
            tr->pre.clear();
            tr->post.clear();
        }
        for (std::size_t li = 0; li < layers_.size(); ++li) {
            const auto& l = layers_[li];
            const double* w = params_.data() + l.weight_offset;
            const double* b = params_.data() + l.bias_offset;
            Vector z(l.rows);
            for (std::size_t r = 0; r < l.rows; ++r) {
                double s = b[r];
                const double* row = w + r * l.cols;
                for (std::size_t q = 0; q < l.cols; ++q) s += row[q] * h[q];
                z[r] = s;
            }
            if (li + 1 == layers_.size()) return z;
            Vector a(l.rows);
            for (std::size_t r = 0; r < l.rows; ++r) a[r] = activation(z[r]);
            if (tr) {
                tr->pre.push_back(std::move(z));
                tr->post.push_back(a);
            }
            h = std::move(a);
        }
        return h;  // unreachable: depth >= 1
    }

    DenoiserArch arch_;
    std::vector<LayerShape> layers_;
    std::vector<double> params_;
    Vector null_condition_;
};

static_assert(NoisePredictor<DenoiserModel>);

template <NoisePredictor P>
Vector eps_predict(const P& model, const Vector& x_t, int t, const Vector& c) {
    return model.predict(x_t, t, c);
}

/// Classifier-free guidance: eps_u + w (eps_c - eps_u). w = 1 is the plain
/// conditional prediction, bit for bit.
template <NoisePredictor P>
Vector eps_predict_guided(const P& model, const Vector& x_t, int t, const Vector& c, double w) {
    if (w == 1.0) return model.predict(x_t, t, c);
    const Vector uncond = model.predict(x_t, t, model.null_condition());
    if (w == 0.0) return uncond;
    const Vector cond = model.predict(x_t, t, c);
    Vector out(uncond.dim());
    for (std::size_t i = 0; i < out.dim(); ++i) out[i] = uncond[i] + w * (cond[i] - uncond[i]);
    return out;
}

}  // namespace smpo
