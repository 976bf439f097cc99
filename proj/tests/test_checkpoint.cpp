#include <gtest/gtest.h>

#include "fd.hpp"
#include "patchforge/checkpoint.hpp"

using namespace patchforge;

namespace {

struct Chain {
  std::vector<LayerPtr<double>> layers;
  ParamSet<double> params;
};

// Alternating conv / relu with a constant channel width.
Chain make_chain(std::size_t L, std::uint64_t seed, std::size_t channels = 3) {
  std::mt19937_64 rng(seed);
  Chain c;
  for (std::size_t l = 0; l < L; ++l) {
    if (l % 2 == 0) {
      const auto idx = c.params.add("k" + std::to_string(l), fd::random(Shape{channels, channels, 3, 3}, rng, -0.4, 0.4));
      c.layers.push_back(std::make_shared<Conv2dLayer<double>>(idx));
    } else {
      c.layers.push_back(std::make_shared<ReluLayer<double>>());
    }
  }
  return c;
}

// Plain backprop keeping every activation, without the engine.
std::pair<Tensor<double>, Tensor<double>> reference_backward(Chain& c, const Tensor<double>& x, const Tensor<double>& up) {
  std::vector<Tensor<double>> acts{x};
  for (const auto& l : c.layers) acts.push_back(l->forward(c.params, acts.back()));
  Tensor<double> g = up;
  for (std::size_t l = c.layers.size(); l-- > 0;) g = c.layers[l]->backward(c.params, acts[l], g, true);
  return {acts.back(), g};
}

std::vector<double> all_grads(const ParamSet<double>& p) {
  std::vector<double> out;
  for (std::size_t i = 0; i < p.size(); ++i) out.insert(out.end(), p[i].grad->begin(), p[i].grad->end());
  return out;
}

struct EngineRun {
  Tensor<double> output, input_grad;
  std::vector<double> grads;
  MemoryMeter meter;
  long forward_peak = 0;
};

EngineRun run_engine(std::size_t L, const CheckpointPlan& plan, std::uint64_t seed = 5) {
  Chain c = make_chain(L, seed);
  std::mt19937_64 rng(seed + 100);
  auto x = fd::random(Shape{2, 3, 6, 6}, rng);
  auto up = fd::random(Shape{2, 3, 6, 6}, rng);
  c.params.zero_grad();
  for (std::size_t i = 0; i < c.params.size(); ++i) c.params[i].grad.emplace(c.params[i].size(), 0.0);
  EngineRun r;
  ChainState<double> st;
  r.output = checkpointed_forward(c.layers, c.params, x, plan, r.meter, st);
  r.forward_peak = r.meter.peak_activation_count;
  r.input_grad = checkpointed_backward(c.layers, c.params, st, up, plan, r.meter, true);
  r.grads = all_grads(c.params);
  return r;
}

std::vector<double> reference_grads(std::size_t L, std::uint64_t seed, Tensor<double>* out, Tensor<double>* gin) {
  Chain c = make_chain(L, seed);
  for (std::size_t i = 0; i < c.params.size(); ++i) c.params[i].grad.emplace(c.params[i].size(), 0.0);
  std::mt19937_64 rng(seed + 100);
  auto x = fd::random(Shape{2, 3, 6, 6}, rng);
  auto up = fd::random(Shape{2, 3, 6, 6}, rng);
  auto [o, g] = reference_backward(c, x, up);
  *out = o;
  *gin = g;
  return all_grads(c.params);
}

}  // namespace

TEST(CheckpointPlan, Examples) {
  EXPECT_EQ(plan_checkpoints(8, 4).indices(), (std::vector<std::size_t>{0, 4}));
  EXPECT_EQ(plan_checkpoints(8, 4).segment(0), (std::pair<std::size_t, std::size_t>{0, 4}));
  EXPECT_EQ(plan_checkpoints(8, 4).segment(1), (std::pair<std::size_t, std::size_t>{4, 8}));
  EXPECT_EQ(plan_checkpoints(1).indices(), (std::vector<std::size_t>{0}));
  EXPECT_EQ(plan_checkpoints(9).indices(), (std::vector<std::size_t>{0, 3, 6}));
  EXPECT_EQ(plan_checkpoints(16).indices(), (std::vector<std::size_t>{0, 4, 8, 12}));
}

TEST(CheckpointPlan, Errors) {
  EXPECT_THROW(plan_checkpoints(4, 5), ConfigError);
  EXPECT_THROW(plan_checkpoints(0), ConfigError);
  EXPECT_THROW(CheckpointPlan(4, {1, 2}), ConfigError);
  EXPECT_THROW(CheckpointPlan(4, {0, 2, 2}), ConfigError);
  EXPECT_THROW(CheckpointPlan(4, {0, 4}), ConfigError);
}

TEST(CheckpointPlan, SegmentsPartitionLayers) {
  for (std::size_t L = 1; L <= 30; ++L) {
    for (std::size_t s = 1; s <= L; ++s) {
      const auto plan = plan_checkpoints(L, s);
      std::size_t next = 0;
      for (std::size_t k = 0; k < plan.checkpoint_count(); ++k) {
        auto [b, e] = plan.segment(k);
        EXPECT_EQ(b, next);
        EXPECT_LT(b, e);
        next = e;
        for (std::size_t l = b; l < e; ++l) EXPECT_EQ(plan.segment_of(l), k);
      }
      EXPECT_EQ(next, L);
    }
  }
}

TEST(Checkpoint, EightLayersTwoSegmentsCountsEachActivationTwice) {
  const auto plan = plan_checkpoints(8, 4);
  const EngineRun r = run_engine(8, plan);
  for (std::size_t l = 0; l < 8; ++l) EXPECT_EQ(r.meter.forward_op_count[l], plan.is_checkpoint(l) ? 1 : 2) << l;
  // two checkpoints, plus the input and output of the layer being computed
  EXPECT_EQ(r.forward_peak, 4);
  EXPECT_EQ(r.meter.live_activation_count, 0);
}

TEST(Checkpoint, GoldenMeterDump) {
  const EngineRun r = run_engine(8, plan_checkpoints(8, 4));
  const std::string golden =
      "layer 0 forward 1 retained 1\n"
      "layer 1 forward 2 retained 0\n"
      "layer 2 forward 2 retained 0\n"
      "layer 3 forward 2 retained 0\n"
      "layer 4 forward 1 retained 1\n"
      "layer 5 forward 2 retained 0\n"
      "layer 6 forward 2 retained 0\n"
      "layer 7 forward 2 retained 0\n"
      "peak 5\n";
  EXPECT_EQ(r.meter.dump(), golden);
}

TEST(Checkpoint, EveryLayerPlanIsVanilla) {
  const EngineRun r = run_engine(8, CheckpointPlan::every_layer(8));
  for (long c : r.meter.forward_op_count) EXPECT_EQ(c, 1);
  EXPECT_EQ(r.forward_peak, 8);
  Tensor<double> out, gin;
  const auto ref = reference_grads(8, 5, &out, &gin);
  EXPECT_EQ(r.grads, ref);
  EXPECT_EQ(r.output, out);
}

TEST(Checkpoint, TwelveLayerChainMatchesReferenceExactly) {
  for (std::uint64_t seed : {1, 2, 3}) {
    Tensor<double> out, gin;
    const auto ref = reference_grads(12, seed, &out, &gin);
    for (const auto& plan : {plan_checkpoints(12), plan_checkpoints(12, 6), CheckpointPlan::every_layer(12)}) {
      const EngineRun r = run_engine(12, plan, seed);
      EXPECT_EQ(r.output, out);
      EXPECT_EQ(r.grads, ref);
      EXPECT_EQ(r.input_grad, gin);
    }
    const auto plan = plan_checkpoints(12);
    const EngineRun r = run_engine(12, plan, seed);
    EXPECT_LE(r.meter.peak_activation_count,
              static_cast<long>(plan.checkpoint_count() + plan.max_segment_length() + 1));
    EXPECT_LT(r.meter.peak_activation_count, 12);
  }
}

TEST(Checkpoint, MemoryAndRecomputeBounds) {
  for (std::size_t L = 4; L <= 20; ++L) {
    for (std::size_t s = 1; s <= L; ++s) {
      const auto plan = plan_checkpoints(L, s);
      const EngineRun r = run_engine(L, plan, L * 31 + s);
      const long bound = static_cast<long>((L + s - 1) / s + s + 2);
      EXPECT_LE(r.meter.peak_activation_count, bound) << "L=" << L << " s=" << s;
      if (s > 1 && s < L) {
        EXPECT_LT(r.meter.peak_activation_count, static_cast<long>(L)) << "L=" << L << " s=" << s;
      }
      EXPECT_LE(r.meter.total_forward_ops(), static_cast<long>(2 * L));
      for (std::size_t l = 0; l < L; ++l) {
        if (plan.is_checkpoint(l)) {
          EXPECT_EQ(r.meter.forward_op_count[l], 1);
        }
      }
      EXPECT_EQ(r.meter.live_activation_count, 0);
    }
  }
}

TEST(Checkpoint, ForwardIsBitwiseVanilla) {
  Chain c = make_chain(10, 9);
  std::mt19937_64 rng(9);
  auto x = fd::random(Shape{1, 3, 6, 6}, rng);
  Tensor<double> ref = x;
  for (const auto& l : c.layers) ref = l->forward(c.params, ref);
  MemoryMeter m;
  ChainState<double> st;
  EXPECT_EQ(max_abs_diff(checkpointed_forward(c.layers, c.params, x, plan_checkpoints(10), m, st), ref), 0.0);
}

TEST(Checkpoint, SecondBackwardIsAnError) {
  Chain c = make_chain(6, 4);
  std::mt19937_64 rng(4);
  auto x = fd::random(Shape{1, 3, 6, 6}, rng);
  const auto plan = plan_checkpoints(6);
  MemoryMeter m;
  ChainState<double> st;
  auto y = checkpointed_forward(c.layers, c.params, x, plan, m, st);
  Tensor<double> up(y.shape(), 1.0);
  checkpointed_backward(c.layers, c.params, st, up, plan, m);
  EXPECT_THROW(checkpointed_backward(c.layers, c.params, st, up, plan, m), InternalError);
}

TEST(Checkpoint, PlanMismatchIsAnError) {
  Chain c = make_chain(6, 4);
  std::mt19937_64 rng(4);
  auto x = fd::random(Shape{1, 3, 6, 6}, rng);
  MemoryMeter m;
  ChainState<double> st;
  auto y = checkpointed_forward(c.layers, c.params, x, plan_checkpoints(6, 2), m, st);
  EXPECT_THROW(checkpointed_backward(c.layers, c.params, st, Tensor<double>(y.shape(), 1.0), plan_checkpoints(6, 3), m),
               InternalError);
}

namespace {
class JoinLayer final : public Layer<double> {
 public:
  std::string kind() const override { return "join"; }
  std::size_t arity() const override { return 2; }
  Tensor<double> forward(const ParamSet<double>&, const Tensor<double>& x) const override { return x; }
  Tensor<double> backward(ParamSet<double>&, const Tensor<double>&, const Tensor<double>& g, bool) const override {
    return g;
  }
};
}  // namespace

TEST(Checkpoint, NonChainTopologyIsRejected) {
  Chain c = make_chain(3, 1);
  c.layers.push_back(std::make_shared<JoinLayer>());
  MemoryMeter m;
  ChainState<double> st;
  EXPECT_THROW(checkpointed_forward(c.layers, c.params, Tensor<double>(Shape{1, 3, 4, 4}), plan_checkpoints(4), m, st),
               TopologyError);
}

TEST(Overhead, SixteenLayersAddTwelveEvaluations) {
  const EngineRun v = run_engine(16, CheckpointPlan::every_layer(16));
  const EngineRun c = run_engine(16, plan_checkpoints(16));
  const auto rep = overhead_report(v.meter, c.meter);
  EXPECT_EQ(rep.extra_forward_ops, 12);
  EXPECT_LE(rep.extra_forward_ratio, 2.0);
  EXPECT_LE(rep.training_op_ratio, kMaxTrainingOpRatio);
  EXPECT_FALSE(rep.regression);
}

TEST(Overhead, IdenticalPlansGiveUnitRatio) {
  const EngineRun a = run_engine(9, plan_checkpoints(9));
  const auto rep = overhead_report(a.meter, a.meter, 2.0, 2.0);
  EXPECT_EQ(rep.extra_forward_ratio, 1.0);
  EXPECT_EQ(*rep.wall_time_ratio, 1.0);
  EXPECT_NE(rep.to_string().find("ok"), std::string::npos);
}

TEST(Overhead, MismatchedWorkloadsAndRegressionFlag) {
  const EngineRun a = run_engine(9, plan_checkpoints(9));
  const EngineRun b = run_engine(8, plan_checkpoints(8));
  EXPECT_THROW(overhead_report(a.meter, b.meter), InputError);
  const auto slow = overhead_report(a.meter, a.meter, 1.0, 1.6);
  EXPECT_TRUE(slow.regression);
}

TEST(MemoryMeter, MergeBySummation) {
  const EngineRun a = run_engine(8, plan_checkpoints(8, 4));
  MemoryMeter sum = a.meter;
  sum += a.meter;
  for (std::size_t l = 0; l < 8; ++l) EXPECT_EQ(sum.forward_op_count[l], 2 * a.meter.forward_op_count[l]);
  EXPECT_EQ(sum.chains_run, 2);
  MemoryMeter m;
  EXPECT_THROW(m.release(), InternalError);
}
