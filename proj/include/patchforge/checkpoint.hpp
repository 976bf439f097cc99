#pragma once

// Gradient checkpointing for sequential layer chains.
//
// Activation l is the output of layer l. During the forward pass only the
// outputs of checkpoint layers are kept; everything else is freed as soon as
// the next layer has consumed it. Backward walks the chain from the top and,
// whenever the input of the current layer is missing, recomputes the whole
// segment that holds it starting from the segment's checkpoint. A layer's
// backward needs only its input, so each activation is freed right after the
// layer above has used it.

#include <cmath>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "patchforge/kernels.hpp"
#include "patchforge/params.hpp"

namespace patchforge {

template <class T>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual std::string kind() const = 0;
  /// Number of activations the layer consumes; the engine only runs chains.
  virtual std::size_t arity() const { return 1; }
  virtual Tensor<T> forward(const ParamSet<T>& params, const Tensor<T>& input) const = 0;
  /// Accumulates parameter gradients into `params`; returns d(input) when
  /// requested, otherwise an empty tensor.
  virtual Tensor<T> backward(ParamSet<T>& params, const Tensor<T>& input, const Tensor<T>& grad_output,
                             bool need_input_grad) const = 0;
};

template <class T>
using LayerPtr = std::shared_ptr<const Layer<T>>;

template <class T>
class Conv2dLayer final : public Layer<T> {
 public:
  Conv2dLayer(std::size_t kernel_index, std::size_t stride = 1, std::size_t pad = 1)
      : kernel_(kernel_index), stride_(stride), pad_(pad) {}
  std::string kind() const override { return "conv2d"; }
  Tensor<T> forward(const ParamSet<T>& params, const Tensor<T>& input) const override {
    return kernels::conv2d_forward(input, params[kernel_], stride_, pad_);
  }
  Tensor<T> backward(ParamSet<T>& params, const Tensor<T>& input, const Tensor<T>& grad_output,
                     bool need_input_grad) const override {
    Tensor<T>& k = params[kernel_];
    if (!k.grad) k.grad.emplace(k.size(), T{0});
    Tensor<T> gin;
    if (need_input_grad) gin = Tensor<T>(input.shape());
    kernels::conv2d_backward(input, k, stride_, pad_, grad_output, std::span<T>(*k.grad),
                             need_input_grad ? gin.data() : std::span<T>());
    return gin;
  }
  std::size_t kernel_index() const { return kernel_; }

 private:
  std::size_t kernel_, stride_, pad_;
};

template <class T>
class ReluLayer final : public Layer<T> {
 public:
  std::string kind() const override { return "relu"; }
  Tensor<T> forward(const ParamSet<T>&, const Tensor<T>& input) const override { return kernels::relu_forward(input); }
  Tensor<T> backward(ParamSet<T>&, const Tensor<T>& input, const Tensor<T>& grad_output, bool) const override {
    Tensor<T> gin(input.shape());
    kernels::relu_backward(input, grad_output, gin.data());
    return gin;
  }
};

template <class T>
class MaxPool2Layer final : public Layer<T> {
 public:
  std::string kind() const override { return "maxpool2"; }
  Tensor<T> forward(const ParamSet<T>&, const Tensor<T>& input) const override { return kernels::maxpool2_forward(input); }
  Tensor<T> backward(ParamSet<T>&, const Tensor<T>& input, const Tensor<T>& grad_output, bool) const override {
    Tensor<T> gin(input.shape());
    kernels::maxpool2_backward(input, grad_output, gin.data());
    return gin;
  }
};

template <class T>
class GlobalAvgLayer final : public Layer<T> {
 public:
  std::string kind() const override { return "global_avg"; }
  Tensor<T> forward(const ParamSet<T>&, const Tensor<T>& input) const override {
    return kernels::global_avg_forward(input);
  }
  Tensor<T> backward(ParamSet<T>&, const Tensor<T>& input, const Tensor<T>& grad_output, bool) const override {
    Tensor<T> gin(input.shape());
    kernels::global_avg_backward(input.shape(), grad_output, gin.data());
    return gin;
  }
};

/// Checkpoint layer indices over a chain of `total_layers`; always holds 0.
class CheckpointPlan {
 public:
  CheckpointPlan(std::size_t total_layers, std::vector<std::size_t> indices)
      : total_(total_layers), indices_(std::move(indices)) {
    if (total_ == 0) throw ConfigError("checkpoint plan needs at least one layer");
    if (indices_.empty() || indices_.front() != 0) throw ConfigError("checkpoint plan must contain layer 0");
    for (std::size_t i = 0; i < indices_.size(); ++i) {
      if (indices_[i] >= total_) throw ConfigError("checkpoint index out of range");
      if (i && indices_[i] <= indices_[i - 1]) throw ConfigError("checkpoint indices must be strictly increasing");
    }
    is_checkpoint_.assign(total_, false);
    for (std::size_t i : indices_) is_checkpoint_[i] = true;
  }

  /// Every layer retained: plain backpropagation.
  static CheckpointPlan every_layer(std::size_t total_layers) {
    std::vector<std::size_t> idx(total_layers);
    for (std::size_t i = 0; i < total_layers; ++i) idx[i] = i;
    return CheckpointPlan(total_layers, std::move(idx));
  }

  std::size_t total_layers() const noexcept { return total_; }
  const std::vector<std::size_t>& indices() const noexcept { return indices_; }
  std::size_t checkpoint_count() const noexcept { return indices_.size(); }
  bool is_checkpoint(std::size_t layer) const { return is_checkpoint_.at(layer); }

  /// Index of the segment holding `layer`.
  std::size_t segment_of(std::size_t layer) const {
    std::size_t s = 0;
    while (s + 1 < indices_.size() && indices_[s + 1] <= layer) ++s;
    return s;
  }

  /// [begin, end) layer span of segment `s`.
  std::pair<std::size_t, std::size_t> segment(std::size_t s) const {
    return {indices_.at(s), s + 1 < indices_.size() ? indices_[s + 1] : total_};
  }

  std::size_t max_segment_length() const {
    std::size_t m = 0;
    for (std::size_t s = 0; s < indices_.size(); ++s) m = std::max(m, segment(s).second - segment(s).first);
    return m;
  }

  bool operator==(const CheckpointPlan& o) const { return total_ == o.total_ && indices_ == o.indices_; }

 private:
  std::size_t total_;
  std::vector<std::size_t> indices_;
  std::vector<bool> is_checkpoint_;
};

/// Checkpoints at {0, s, 2s, ...}; spacing 0 selects s = ceil(sqrt(L)).
inline CheckpointPlan plan_checkpoints(std::size_t total_layers, std::size_t spacing = 0) {
  if (total_layers == 0) throw ConfigError("checkpoint plan needs at least one layer");
  if (spacing == 0) spacing = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(total_layers))));
  if (spacing > total_layers) throw ConfigError("checkpoint spacing exceeds layer count");
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < total_layers; i += spacing) idx.push_back(i);
  return CheckpointPlan(total_layers, std::move(idx));
}

/// Counts engine-owned activations and per-layer forward evaluations.
struct MemoryMeter {
  long live_activation_count = 0;
  long peak_activation_count = 0;
  std::vector<long> forward_op_count;
  std::vector<bool> retained;
  long chains_run = 0;

  void resize(std::size_t layers) {
    if (forward_op_count.size() < layers) {
      forward_op_count.resize(layers, 0);
      retained.resize(layers, false);
    }
  }
  void acquire() {
    ++live_activation_count;
    peak_activation_count = std::max(peak_activation_count, live_activation_count);
  }
  void release() {
    if (--live_activation_count < 0) throw InternalError("memory meter went negative");
  }
  long total_forward_ops() const {
    long s = 0;
    for (long c : forward_op_count) s += c;
    return s;
  }
  void reset() { *this = MemoryMeter{}; }

  /// Merges another meter by summation.
  MemoryMeter& operator+=(const MemoryMeter& o) {
    resize(o.forward_op_count.size());
    for (std::size_t i = 0; i < o.forward_op_count.size(); ++i) {
      forward_op_count[i] += o.forward_op_count[i];
      retained[i] = retained[i] || o.retained[i];
    }
    live_activation_count += o.live_activation_count;
    peak_activation_count += o.peak_activation_count;
    chains_run += o.chains_run;
    return *this;
  }

  /// Line-oriented dump: one `layer` line per layer, then `peak`.
  std::string dump() const {
    std::ostringstream os;
    for (std::size_t i = 0; i < forward_op_count.size(); ++i) {
      os << "layer " << i << " forward " << forward_op_count[i] << " retained " << (retained[i] ? 1 : 0) << '\n';
    }
    os << "peak " << peak_activation_count << '\n';
    return os.str();
  }
};

/// Everything a chain keeps between its forward and backward passes.
template <class T>
struct ChainState {
  std::optional<CheckpointPlan> plan;
  Tensor<T> input;
  std::vector<std::optional<Tensor<T>>> activations;
  Tensor<T> output_copy;  // used to verify that recomputation reproduces the forward pass
  bool backward_done = false;
};

namespace detail {

template <class T>
void check_chain(const std::vector<LayerPtr<T>>& layers, const CheckpointPlan& plan) {
  if (layers.size() != plan.total_layers()) throw ConfigError("checkpoint plan does not match the chain length");
  for (const auto& l : layers) {
    if (!l || l->arity() != 1) throw TopologyError("checkpointing supports sequential chains only");
  }
}

template <class T>
void free_activation(ChainState<T>& st, std::size_t l, MemoryMeter& meter) {
  if (st.activations[l]) {
    st.activations[l].reset();
    meter.release();
  }
}

}  // namespace detail

/// Runs the chain keeping only checkpoint outputs. The result is bitwise equal
/// to running the layers one after the other.
template <class T>
Tensor<T> checkpointed_forward(const std::vector<LayerPtr<T>>& layers, const ParamSet<T>& params, Tensor<T> input,
                               const CheckpointPlan& plan, MemoryMeter& meter, ChainState<T>& state) {
  detail::check_chain(layers, plan);
  const std::size_t L = layers.size();
  meter.resize(L);
  ++meter.chains_run;
  state = ChainState<T>{};
  state.plan = plan;
  state.input = std::move(input);
  state.activations.resize(L);
  for (std::size_t l = 0; l < L; ++l) {
    const Tensor<T>& in = l == 0 ? state.input : *state.activations[l - 1];
    state.activations[l] = layers[l]->forward(params, in);
    meter.acquire();
    ++meter.forward_op_count[l];
    meter.retained[l] = plan.is_checkpoint(l);
    if (l > 0 && !plan.is_checkpoint(l - 1)) detail::free_activation(state, l - 1, meter);
  }
  state.output_copy = *state.activations[L - 1];
  if (!plan.is_checkpoint(L - 1)) detail::free_activation(state, L - 1, meter);
  return state.output_copy;
}

/// Backpropagates `grad_output` through the chain, recomputing each segment
/// once from its checkpoint. Returns d(input) when requested.
template <class T>
Tensor<T> checkpointed_backward(const std::vector<LayerPtr<T>>& layers, ParamSet<T>& params, ChainState<T>& state,
                                const Tensor<T>& grad_output, const CheckpointPlan& plan, MemoryMeter& meter,
                                bool need_input_grad = false) {
  if (!state.plan || !(*state.plan == plan)) throw InternalError("checkpointed_backward: plan differs from forward");
  if (state.backward_done) throw InternalError("checkpointed_backward: retained forward state already consumed");
  detail::check_chain(layers, plan);
  const std::size_t L = layers.size();
  meter.resize(L);

  auto recompute_segment = [&](std::size_t seg) {
    auto [begin, end] = plan.segment(seg);
    for (std::size_t l = begin + 1; l < end; ++l) {
      if (state.activations[l]) continue;
      if (!state.activations[l - 1]) throw InternalError("recompute source missing at layer " + std::to_string(l - 1));
      state.activations[l] = layers[l]->forward(params, *state.activations[l - 1]);
      meter.acquire();
      ++meter.forward_op_count[l];
    }
  };

  // The top segment is recomputed in full so every non-checkpoint layer is
  // evaluated exactly twice; its output must match the forward pass.
  if (!plan.is_checkpoint(L - 1)) {
    recompute_segment(plan.segment_of(L - 1));
    if (!(*state.activations[L - 1] == state.output_copy)) {
      throw InternalError("recomputed chain output differs from the forward pass");
    }
  }
  detail::free_activation(state, L - 1, meter);

  Tensor<T> g = grad_output;
  for (std::size_t l = L; l-- > 0;) {
    if (l == 0) {
      g = layers[0]->backward(params, state.input, g, need_input_grad);
      break;
    }
    if (!state.activations[l - 1]) recompute_segment(plan.segment_of(l - 1));
    g = layers[l]->backward(params, *state.activations[l - 1], g, true);
    detail::free_activation(state, l - 1, meter);
  }
  state.backward_done = true;
  state.activations.clear();
  state.input = Tensor<T>{};
  return g;
}

/// Vanilla (every layer retained) convenience wrappers.
template <class T>
Tensor<T> vanilla_forward(const std::vector<LayerPtr<T>>& layers, const ParamSet<T>& params, Tensor<T> input,
                          MemoryMeter& meter, ChainState<T>& state) {
  return checkpointed_forward(layers, params, std::move(input), CheckpointPlan::every_layer(layers.size()), meter, state);
}

struct OverheadReport {
  long vanilla_forward_ops = 0;
  long checkpointed_forward_ops = 0;
  long extra_forward_ops = 0;
  double extra_forward_ratio = 1.0;
  // Forward+backward op cost with backward costed at twice a forward.
  double training_op_ratio = 1.0;
  std::optional<double> wall_time_ratio;
  bool regression = false;

  std::string to_string() const {
    std::ostringstream os;
    os << "forward ops vanilla " << vanilla_forward_ops << " checkpointed " << checkpointed_forward_ops << " extra "
       << extra_forward_ops << '\n'
       << "extra-forward ratio " << extra_forward_ratio << '\n'
       << "training op ratio " << training_op_ratio << '\n';
    if (wall_time_ratio) os << "wall-time ratio " << *wall_time_ratio << '\n';
    os << (regression ? "REGRESSION" : "ok") << '\n';
    return os.str();
  }
};

inline constexpr double kMaxTrainingOpRatio = 1.34;
inline constexpr double kMaxWallTimeRatio = 1.5;

/// Compares the forward work of a vanilla and a checkpointed run of the same
/// workload; optional wall times (seconds) add a measured ratio.
inline OverheadReport overhead_report(const MemoryMeter& vanilla, const MemoryMeter& checkpointed,
                                      std::optional<double> vanilla_seconds = std::nullopt,
                                      std::optional<double> checkpointed_seconds = std::nullopt) {
  if (vanilla.chains_run != checkpointed.chains_run ||
      vanilla.forward_op_count.size() != checkpointed.forward_op_count.size()) {
    throw InputError("overhead_report: meters come from different workloads");
  }
  OverheadReport r;
  r.vanilla_forward_ops = vanilla.total_forward_ops();
  r.checkpointed_forward_ops = checkpointed.total_forward_ops();
  r.extra_forward_ops = r.checkpointed_forward_ops - r.vanilla_forward_ops;
  if (r.vanilla_forward_ops > 0) {
    const double v = static_cast<double>(r.vanilla_forward_ops);
    r.extra_forward_ratio = static_cast<double>(r.checkpointed_forward_ops) / v;
    r.training_op_ratio = (static_cast<double>(r.checkpointed_forward_ops) + 2.0 * v) / (3.0 * v);
  }
  if (vanilla_seconds && checkpointed_seconds && *vanilla_seconds > 0) {
    r.wall_time_ratio = *checkpointed_seconds / *vanilla_seconds;
  }
  r.regression = r.training_op_ratio > kMaxTrainingOpRatio || (r.wall_time_ratio && *r.wall_time_ratio > kMaxWallTimeRatio);
  return r;
}

}  // namespace patchforge
