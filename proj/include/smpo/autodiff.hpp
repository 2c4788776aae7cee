#pragma once

#include <array>
#include <cmath>
#include <memory>
#include <span>
#include <stdexcept>
#include <vector>

#include "smpo/denoiser.hpp"
#include "smpo/errors.hpp"
#include "smpo/numerics.hpp"

namespace smpo {

/// Gradients of a scalar loss w.r.t. every trainable parameter, in the
/// model's flat layout.
struct GradientBundle {
    std::vector<LayerShape> layout;
    std::vector<double> grads;
    double loss = 0.0;

    GradientBundle() = default;
    explicit GradientBundle(const DenoiserModel& model)
        : layout(model.layers()), grads(model.num_params(), 0.0) {}

    std::span<const double> weight_grad(std::size_t layer) const {
        const auto& l = layout.at(layer);
        return std::span<const double>(grads).subspan(l.weight_offset, l.rows * l.cols);
    }
    std::span<const double> bias_grad(std::size_t layer) const {
        const auto& l = layout.at(layer);
        return std::span<const double>(grads).subspan(l.bias_offset, l.rows);
    }

    bool matches(const DenoiserModel& model) const noexcept { return grads.size() == model.num_params(); }

    GradientBundle& operator+=(const GradientBundle& o) {
        if (grads.empty()) {
            *this = o;
            return *this;
        }
        if (o.grads.size() != grads.size()) throw DimensionMismatchError("gradient bundle sizes differ");
        for (std::size_t i = 0; i < grads.size(); ++i) grads[i] += o.grads[i];
        loss += o.loss;
        return *this;
    }

    GradientBundle& operator*=(double s) noexcept {
        for (double& g : grads) g *= s;
        loss *= s;
        return *this;
    }

    double norm() const noexcept {
        double s = 0.0;
        for (double g : grads) s += g * g;
        return std::sqrt(s);
    }

    bool all_finite() const noexcept {
        for (double g : grads) {
            if (!std::isfinite(g)) return false;
        }
        return std::isfinite(loss);
    }
};

/// Reverse-mode tape over vector-valued nodes. Scalars are 1-D vectors.
/// Nodes are appended in evaluation order, so the tape is already
/// topologically sorted. At most one model is trainable per graph; other
/// network evaluations (the frozen reference) only pass input gradients.
class LossGraph {
public:
    using NodeId = std::size_t;

    NodeId constant(Vector v) {
        Node n;
        n.kind = Kind::constant;
        n.value = std::move(v);
        return push(std::move(n));
    }

    NodeId scalar(double v) { return constant(Vector{v}); }

    /// eps(x, t, c) of `model`. `trainable` marks the parameters that backward() differentiates.
    NodeId net(const DenoiserModel& model, NodeId x, int t, const Vector& c, bool trainable) {
        if (trainable) {
            if (trainable_ != nullptr && trainable_ != &model) {
                throw std::logic_error("LossGraph: only one trainable model per graph");
            }
            trainable_ = &model;
        }
        const bool needs = trainable || nodes_.at(x).requires_grad;
        if (!needs) return constant(model.predict(nodes_[x].value, t, c));
        Node n;
        n.kind = Kind::net;
        n.in = {x, x};
        n.model = &model;
        n.trainable = trainable;
        n.trace = std::make_shared<ForwardTrace>(model.forward_trace(nodes_[x].value, t, c));
        n.value = n.trace->output;
        n.requires_grad = true;
        return push(std::move(n));
    }

    /// a*x + b*y
    NodeId axpby(double a, NodeId x, double b, NodeId y) {
        Node n;
        n.kind = Kind::axpby;
        n.in = {x, y};
        n.a = a;
        n.b = b;
        n.value = smpo::axpby(a, nodes_.at(x).value, b, nodes_.at(y).value);
        n.requires_grad = nodes_[x].requires_grad || nodes_[y].requires_grad;
        return push(std::move(n));
    }

    NodeId scale(double a, NodeId x) { return axpby(a, x, 0.0, x); }
    NodeId add(NodeId x, NodeId y) { return axpby(1.0, x, 1.0, y); }
    NodeId sub(NodeId x, NodeId y) { return axpby(1.0, x, -1.0, y); }

    /// ||x - y||^2 as a scalar node.
    NodeId squared_distance(NodeId x, NodeId y) {
        Node n;
        n.kind = Kind::squared_distance;
        n.in = {x, y};
        n.value = Vector{smpo::squared_distance(nodes_.at(x).value, nodes_.at(y).value)};
        n.requires_grad = nodes_[x].requires_grad || nodes_[y].requires_grad;
        return push(std::move(n));
    }

    /// log(1 + exp(z)) of a scalar node.
    NodeId softplus(NodeId z) {
        require_scalar(z);
        Node n;
        n.kind = Kind::softplus;
        n.in = {z, z};
        n.value = Vector{smpo::softplus(nodes_[z].value[0])};
        n.requires_grad = nodes_[z].requires_grad;
        return push(std::move(n));
    }

    const Vector& value(NodeId id) const { return nodes_.at(id).value; }
    double scalar_value(NodeId id) const {
        require_scalar(id);
        return nodes_[id].value[0];
    }
    bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }

    void set_output(NodeId id) {
        require_scalar(id);
        output_ = id;
        has_output_ = true;
    }
    NodeId output() const { return output_; }
    double loss() const {
        if (!has_output_) throw std::logic_error("LossGraph: no output node");
        return nodes_[output_].value[0];
    }

    bool consumed() const noexcept { return consumed_; }
    std::size_t size() const noexcept { return nodes_.size(); }
    const DenoiserModel* trainable_model() const noexcept { return trainable_; }

    /// Sum of two losses; the result owns both tapes.
    friend LossGraph operator+(LossGraph a, const LossGraph& b) {
        if (a.consumed_ || b.consumed_) throw GraphReuseError("cannot combine a differentiated graph");
        if (a.trainable_ && b.trainable_ && a.trainable_ != b.trainable_) {
            throw std::logic_error("LossGraph: graphs train different models");
        }
        if (!a.trainable_) a.trainable_ = b.trainable_;
        const NodeId offset = a.nodes_.size();
        for (Node n : b.nodes_) {
            n.in[0] += offset;
            n.in[1] += offset;
            a.nodes_.push_back(std::move(n));
        }
        a.set_output(a.add(a.output_, b.output_ + offset));
        return a;
    }

    /// Reverse sweep. A graph may be differentiated once.
    GradientBundle backward(const DenoiserModel& model) {
        GradientBundle bundle(model);
        backward_into(model, bundle);
        return bundle;
    }

    /// Reverse sweep that adds the gradient (and the loss) into `bundle`.
    void backward_into(const DenoiserModel& model, GradientBundle& bundle) {
        if (consumed_) throw GraphReuseError("loss graph already differentiated; re-run the forward pass");
        if (!has_output_) throw std::logic_error("LossGraph: no output node");
        if (trainable_ != nullptr && trainable_ != &model) {
            throw std::invalid_argument("backward: graph was built for a different trainable model");
        }
        if (!bundle.matches(model)) throw DimensionMismatchError("backward: bundle does not match the model");
        consumed_ = true;
        bundle.loss += loss();

        std::vector<Vector> grad(nodes_.size());
        grad[output_] = Vector{1.0};
        for (NodeId id = output_ + 1; id-- > 0;) {
            const Node& n = nodes_[id];
            if (!n.requires_grad || grad[id].empty()) continue;
            const Vector& g = grad[id];
            switch (n.kind) {
                case Kind::constant:
                    break;
                case Kind::axpby:
                    accumulate(grad, n.in[0], n.a, g);
                    accumulate(grad, n.in[1], n.b, g);
                    break;
                case Kind::squared_distance: {
                    const Vector diff = nodes_[n.in[0]].value - nodes_[n.in[1]].value;
                    accumulate(grad, n.in[0], 2.0 * g[0], diff);
                    accumulate(grad, n.in[1], -2.0 * g[0], diff);
                    break;
                }
                case Kind::softplus:
                    accumulate(grad, n.in[0], sigmoid(nodes_[n.in[0]].value[0]), g);
                    break;
                case Kind::net: {
                    const bool want_input = nodes_[n.in[0]].requires_grad;
                    Vector in_grad;
                    std::span<double> pg = n.trainable ? std::span<double>(bundle.grads) : std::span<double>();
                    n.model->backprop(*n.trace, g, pg, want_input ? &in_grad : nullptr);
                    if (want_input) accumulate(grad, n.in[0], 1.0, in_grad);
                    break;
                }
            }
        }
    }

private:
    enum class Kind { constant, net, axpby, squared_distance, softplus };

    struct Node {
        Kind kind = Kind::constant;
        Vector value;
        std::array<NodeId, 2> in{0, 0};
        double a = 0.0;
        double b = 0.0;
        bool requires_grad = false;
        bool trainable = false;
        const DenoiserModel* model = nullptr;
        std::shared_ptr<const ForwardTrace> trace;
    };

    NodeId push(Node n) {
        nodes_.push_back(std::move(n));
        return nodes_.size() - 1;
    }

    void require_scalar(NodeId id) const {
        if (nodes_.at(id).value.dim() != 1) throw DimensionMismatchError("LossGraph: expected a scalar node");
    }

    void accumulate(std::vector<Vector>& grad, NodeId target, double s, const Vector& g) const {
        if (!nodes_[target].requires_grad) return;
        Vector& dst = grad[target];
        if (dst.empty()) dst = Vector(g.dim(), 0.0);
        for (std::size_t i = 0; i < g.dim(); ++i) dst[i] += s * g[i];
    }

    std::vector<Node> nodes_;
    NodeId output_ = 0;
    bool has_output_ = false;
    bool consumed_ = false;
    const DenoiserModel* trainable_ = nullptr;
};

/// Exact reverse-mode gradients of the graph's scalar output w.r.t. `model`.
inline GradientBundle backward(const DenoiserModel& model, LossGraph& graph) { return graph.backward(model); }

}  // namespace smpo
