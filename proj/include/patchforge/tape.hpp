#pragma once

// Reverse-mode tape. Nodes are appended in creation order, which is a
// topological order; backward walks them in reverse. A node's activation can
// be released after the forward pass and is recomputed on demand from its
// inputs when backward needs it.

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "patchforge/aggregation.hpp"
#include "patchforge/kernels.hpp"
#include "patchforge/tensor.hpp"

namespace patchforge {

template <class T>
class Tape {
 public:
  struct Var {
    std::size_t id;
  };

  using Inputs = std::vector<const Tensor<T>*>;
  using GradSinks = std::vector<std::vector<T>*>;
  using ForwardFn = std::function<Tensor<T>(const Inputs&)>;
  // Accumulates into the non-null sinks, one per input.
  using BackwardFn = std::function<void(const Inputs&, const Tensor<T>& out, const Tensor<T>& grad_out, GradSinks&)>;

  Var constant(Tensor<T> value) { return push_leaf(std::move(value), nullptr, false); }

  Var leaf(Tensor<T> value, bool requires_grad = true) { return push_leaf(std::move(value), nullptr, requires_grad); }

  /// Binds an external parameter; backward accumulates into `param.grad`.
  Var parameter(Tensor<T>& param) {
    Var v = push_leaf(Tensor<T>{}, &param, true);
    nodes_.back().grad_target = &param;
    return v;
  }

  /// Binds an external tensor read-only (no gradient).
  Var bind(const Tensor<T>& value) { return push_leaf(Tensor<T>{}, &value, false); }

  Var op(std::string name, std::vector<Var> inputs, ForwardFn forward, BackwardFn backward) {
    Node node;
    node.name = std::move(name);
    for (Var v : inputs) {
      check(v);
      node.inputs.push_back(v.id);
      node.requires_grad = node.requires_grad || nodes_[v.id].requires_grad;
    }
    node.forward = std::move(forward);
    node.backward = std::move(backward);
    Inputs in = gather(node.inputs);
    node.value = node.forward(in);
    nodes_.push_back(std::move(node));
    return Var{nodes_.size() - 1};
  }

  const Tensor<T>& value(Var v) {
    check(v);
    return materialize(v.id);
  }

  bool is_retained(Var v) const {
    check(v);
    const Node& n = nodes_[v.id];
    return n.external != nullptr || n.value.has_value();
  }

  /// Drops an activation; it will be recomputed from its inputs if needed.
  void release(Var v) {
    check(v);
    Node& n = nodes_[v.id];
    if (n.external) throw InternalError("cannot release parameter node '" + n.name + "'");
    n.value.reset();
  }

  /// Gradient of a leaf created with requires_grad (zeros if never reached).
  Tensor<T> grad(Var v) const {
    check(v);
    const Node& n = nodes_[v.id];
    if (n.grad_target) {
      const Tensor<T>& p = *n.grad_target;
      return p.grad ? Tensor<T>(p.shape(), *p.grad) : Tensor<T>(p.shape());
    }
    if (n.external) return Tensor<T>(n.external->shape());
    if (!n.leaf_grad) return Tensor<T>(n.value->shape());
    return Tensor<T>(n.value->shape(), *n.leaf_grad);
  }

  void zero_leaf_grads() {
    for (Node& n : nodes_) n.leaf_grad.reset();
  }

  /// Backpropagates `seed` * d(loss). Leaf gradients accumulate across calls.
  void backward(Var loss, T seed = T{1}) {
    check(loss);
    if (materialize(loss.id).size() != 1) throw DimensionError("backward needs a scalar loss");
    std::vector<std::optional<std::vector<T>>> grads(loss.id + 1);
    grads[loss.id].emplace(1, seed);
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      if (!grads[id]) continue;
      Node& n = nodes_[id];
      if (!n.requires_grad) {
        grads[id].reset();
        continue;
      }
      if (!n.backward) {
        if (n.grad_target) {
          n.grad_target->accumulate_grad(*grads[id]);
        } else {
          if (!n.leaf_grad) n.leaf_grad.emplace(grads[id]->size(), T{0});
          for (std::size_t i = 0; i < grads[id]->size(); ++i) (*n.leaf_grad)[i] += (*grads[id])[i];
        }
        grads[id].reset();
        continue;
      }
      GradSinks sinks;
      for (std::size_t in : n.inputs) {
        if (!nodes_[in].requires_grad) {
          sinks.push_back(nullptr);
          continue;
        }
        if (!grads[in]) grads[in].emplace(materialize(in).size(), T{0});
        sinks.push_back(&*grads[in]);
      }
      const Tensor<T>& out = materialize(id);
      Inputs in = gather(n.inputs);
      Tensor<T> grad_out(out.shape(), std::move(*grads[id]));
      grads[id].reset();
      n.backward(in, out, grad_out, sinks);
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  std::size_t recomputations() const noexcept { return recomputations_; }
  const std::string& name(Var v) const { return nodes_.at(v.id).name; }

 private:
  struct Node {
    std::string name;
    std::vector<std::size_t> inputs;
    std::optional<Tensor<T>> value;
    const Tensor<T>* external = nullptr;
    Tensor<T>* grad_target = nullptr;
    bool requires_grad = false;
    ForwardFn forward;
    BackwardFn backward;
    std::optional<std::vector<T>> leaf_grad;
  };

  Var push_leaf(Tensor<T> value, const Tensor<T>* external, bool requires_grad) {
    Node node;
    node.name = external ? "param" : "leaf";
    if (!external) node.value = std::move(value);
    node.external = external;
    node.requires_grad = requires_grad;
    nodes_.push_back(std::move(node));
    return Var{nodes_.size() - 1};
  }

  void check(Var v) const {
    if (v.id >= nodes_.size()) throw InternalError("tape variable out of range");
  }

  const Tensor<T>& materialize(std::size_t id) {
    Node& n = nodes_[id];
    if (n.external) return *n.external;
    if (n.value) return *n.value;
    if (!n.forward) throw InternalError("node '" + n.name + "' lost its activation and has no recompute path");
    Inputs in = gather(n.inputs);
    n.value = n.forward(in);
    ++recomputations_;
    return *n.value;
  }

  Inputs gather(const std::vector<std::size_t>& ids) {
    Inputs in;
    for (std::size_t i : ids) in.push_back(&materialize(i));
    return in;
  }

  std::vector<Node> nodes_;
  std::size_t recomputations_ = 0;
};

// Differentiable ops recorded on a tape.
namespace ops {

template <class T>
using Var = typename Tape<T>::Var;

template <class T>
std::span<T> sink_span(std::vector<T>* sink) {
  return sink ? std::span<T>(*sink) : std::span<T>();
}

template <class T>
Var<T> conv2d(Tape<T>& tape, Var<T> input, Var<T> kernel, std::size_t stride, std::size_t pad) {
  return tape.op(
      "conv2d", {input, kernel},
      [=](const auto& in) { return kernels::conv2d_forward(*in[0], *in[1], stride, pad); },
      [=](const auto& in, const Tensor<T>&, const Tensor<T>& go, auto& sinks) {
        kernels::conv2d_backward(*in[0], *in[1], stride, pad, go, sink_span(sinks[1]), sink_span(sinks[0]));
      });
}

template <class T>
Var<T> relu(Tape<T>& tape, Var<T> x) {
  return tape.op(
      "relu", {x}, [](const auto& in) { return kernels::relu_forward(*in[0]); },
      [](const auto& in, const Tensor<T>&, const Tensor<T>& go, auto& sinks) {
        if (sinks[0]) kernels::relu_backward(*in[0], go, std::span<T>(*sinks[0]));
      });
}

template <class T>
Var<T> maxpool2(Tape<T>& tape, Var<T> x) {
  return tape.op(
      "maxpool2", {x}, [](const auto& in) { return kernels::maxpool2_forward(*in[0]); },
      [](const auto& in, const Tensor<T>&, const Tensor<T>& go, auto& sinks) {
        if (sinks[0]) kernels::maxpool2_backward(*in[0], go, std::span<T>(*sinks[0]));
      });
}

template <class T>
Var<T> global_avg(Tape<T>& tape, Var<T> x) {
  return tape.op(
      "global_avg", {x}, [](const auto& in) { return kernels::global_avg_forward(*in[0]); },
      [](const auto& in, const Tensor<T>&, const Tensor<T>& go, auto& sinks) {
        if (sinks[0]) kernels::global_avg_backward(in[0]->shape(), go, std::span<T>(*sinks[0]));
      });
}

template <class T>
Var<T> affine(Tape<T>& tape, Var<T> x, Var<T> weight, Var<T> bias) {
  return tape.op(
      "affine", {x, weight, bias},
      [](const auto& in) { return kernels::affine_forward(*in[0], *in[1], *in[2]); },
      [](const auto& in, const Tensor<T>&, const Tensor<T>& go, auto& sinks) {
        kernels::affine_backward(*in[0], *in[1], go, sink_span(sinks[0]), sink_span(sinks[1]), sink_span(sinks[2]));
      });
}

/// Sum of all elements (scalar).
template <class T>
Var<T> sum(Tape<T>& tape, Var<T> x) {
  return tape.op(
      "sum", {x},
      [](const auto& in) {
        T s = 0;
        for (T v : in[0]->data()) s += v;
        return Tensor<T>::scalar(s);
      },
      [](const auto&, const Tensor<T>&, const Tensor<T>& go, auto& sinks) {
        if (!sinks[0]) return;
        for (T& g : *sinks[0]) g += go[0];
      });
}

/// Mean binary cross-entropy of logits [N,1] against binary labels [N,1].
template <class T>
Var<T> bce_with_logit(Tape<T>& tape, Var<T> logit, const Tensor<T>& label) {
  kernels::check_binary_labels(tape.value(logit), label);
  return tape.op(
      "bce_with_logit", {logit},
      [label](const auto& in) { return Tensor<T>::scalar(kernels::bce_with_logit_forward(*in[0], label)); },
      [label](const auto& in, const Tensor<T>&, const Tensor<T>& go, auto& sinks) {
        if (sinks[0]) kernels::bce_with_logit_backward(*in[0], label, go[0], std::span<T>(*sinks[0]));
      });
}

/// Pools a [patches, channels] matrix into a [1, |enabled|*channels] row.
/// `record`, when given, receives the pooling metadata of the latest
/// (re)computation.
template <class T>
Var<T> aggregate(Tape<T>& tape, Var<T> features, const PoolingConfig& cfg,
                 std::shared_ptr<AggregatedFeature<T>> record = nullptr) {
  if (!record) record = std::make_shared<AggregatedFeature<T>>();
  return tape.op(
      "aggregate", {features},
      [cfg, record](const auto& in) {
        *record = patchforge::aggregate(*in[0], cfg);
        return Tensor<T>(Shape{1, record->values.size()}, record->values);
      },
      [cfg, record](const auto& in, const Tensor<T>&, const Tensor<T>& go, auto& sinks) {
        if (!sinks[0]) return;
        Tensor<T> g = aggregate_backward<T>(go.data(), *in[0], *record, cfg);
        for (std::size_t i = 0; i < g.size(); ++i) (*sinks[0])[i] += g[i];
      });
}

}  // namespace ops
}  // namespace patchforge
