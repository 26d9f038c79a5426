#include <gtest/gtest.h>

#include <cmath>

#include "ulpt/training.hpp"

using namespace ulpt;

namespace {

LossFn quadratic_to(const Matrix& target) {
  return [target](const Matrix& e, std::size_t) { return quadratic_pl_loss(e, target); };
}

}  // namespace

TEST(Schedule, WarmupThenLinearDecay) {
  ScheduleConfig s{0.6, 500, 5000, ScheduleKind::linear_warmup_decay};
  EXPECT_EQ(s.lr(0), 0.0);
  EXPECT_DOUBLE_EQ(s.lr(250), 0.3);
  EXPECT_DOUBLE_EQ(s.lr(500), 0.6);
  EXPECT_DOUBLE_EQ(s.lr(2750), 0.3);
  EXPECT_EQ(s.lr(5000), 0.0);
  EXPECT_EQ(s.lr(9000), 0.0);
}

TEST(Schedule, PeakOnlyAtWarmupAndNeverAbove) {
  ScheduleConfig s{0.6, 500, 5000, ScheduleKind::linear_warmup_decay};
  for (std::size_t t = 0; t <= 5000; ++t) {
    EXPECT_GE(s.lr(t), 0.0);
    EXPECT_LE(s.lr(t), 0.6);
    if (t != 500) {
      EXPECT_LT(s.lr(t), 0.6);
    }
  }
  for (std::size_t t = 1; t <= 500; ++t) EXPECT_GE(s.lr(t), s.lr(t - 1));
  for (std::size_t t = 501; t <= 5000; ++t) EXPECT_LE(s.lr(t), s.lr(t - 1));
}

TEST(Schedule, NoWarmupAndConstant) {
  ScheduleConfig s{0.2, 0, 10, ScheduleKind::linear_warmup_decay};
  EXPECT_DOUBLE_EQ(s.lr(0), 0.2);
  EXPECT_DOUBLE_EQ(s.lr(5), 0.1);
  ScheduleConfig c{0.2, 0, 10, ScheduleKind::constant};
  EXPECT_DOUBLE_EQ(c.lr(9), 0.2);
  EXPECT_THROW((ScheduleConfig{-1.0, 0, 10, ScheduleKind::constant}.validate()), ConfigError);
}

TEST(QuadraticLoss, HandExample) {
  const auto le = quadratic_pl_loss(Matrix{{1, 2}}, Matrix{{0, 4}});
  EXPECT_DOUBLE_EQ(le.loss, 2.5);
  EXPECT_EQ(le.d_e, (Matrix{{1, -2}}));
  EXPECT_THROW(quadratic_pl_loss(Matrix{{1}}, Matrix{{1, 2}}), DimensionError);
}

TEST(ReachableTarget, GeneratorHitsTargetExactly) {
  const PromptConfig cfg{4, 2, 8, Seed{3}, Mode::ulpt};
  const auto tgt = make_reachable_target(cfg, Seed{4});
  PromptState st = init_state(cfg, Seed{5});
  st.params = tgt.generator;
  EXPECT_EQ(quadratic_pl_loss(st.forward(), tgt.target).loss, 0.0);
}

TEST(ReachableTarget, CenteredTargetHasRankAtMostRPlusOne) {
  for (Mode m : {Mode::ulpt, Mode::ulpt_no_scale, Mode::ulpt_no_shift_no_scale}) {
    const PromptConfig cfg{10, 3, 12, Seed{6}, m};
    const auto tgt = make_reachable_target(cfg, Seed{7});
    EXPECT_LE(rank_and_spectral_extremes(tgt.target).rank, 4u) << to_string(m);
  }
}

TEST(ReachableTarget, RejectsTrainableProjection) {
  EXPECT_THROW(make_reachable_target({2, 2, 4, Seed{1}, Mode::dpt_learnable_p}, Seed{1}), ConfigError);
  EXPECT_THROW(make_reachable_target({2, 2, 4, Seed{1}, Mode::vanilla_pt}, Seed{1}), ConfigError);
}

TEST(Training, ZeroRateLeavesStateAndLossFlat) {
  const PromptConfig cfg{4, 2, 8, Seed{1}, Mode::ulpt};
  const auto tgt = make_reachable_target(cfg, Seed{2});
  OptimizerConfig opt;
  opt.kind = OptimizerKind::gd;
  const auto run = train(quadratic_to(tgt.target), cfg, opt, {0.0, 0, 20, ScheduleKind::constant}, Seed{3});
  const PromptState start = init_state(cfg, Seed{3});
  EXPECT_EQ(run.final_state.params.z, start.params.z);
  EXPECT_EQ(run.final_state.params.s, start.params.s);
  EXPECT_EQ(run.final_state.params.b, start.params.b);
  for (const auto& row : run.trace) EXPECT_EQ(row.loss, run.trace.front().loss);
}

TEST(Training, DeterministicAcrossRuns) {
  const PromptConfig cfg{4, 2, 8, Seed{1}, Mode::ulpt};
  const auto tgt = make_reachable_target(cfg, Seed{2});
  const ScheduleConfig sched{0.05, 10, 100, ScheduleKind::linear_warmup_decay};
  const auto a = train(quadratic_to(tgt.target), cfg, {}, sched, Seed{3});
  const auto b = train(quadratic_to(tgt.target), cfg, {}, sched, Seed{3});
  ASSERT_EQ(a.trace.size(), b.trace.size());
  for (std::size_t t = 0; t < a.trace.size(); ++t) EXPECT_EQ(a.trace[t].loss, b.trace[t].loss);
  EXPECT_EQ(*a.final_loss, *b.final_loss);
}

TEST(Training, UpdatesExactlyTheTrainables) {
  for (Mode m : kAllModes) {
    const PromptConfig cfg{3, 2, 6, Seed{1}, m};
    const Matrix target = gaussian_matrix(Seed{9}, 3, 6, 1.0);
    const auto run = train(quadratic_to(target), cfg, {}, {0.01, 0, 3, ScheduleKind::constant}, Seed{2});
    EXPECT_EQ(run.updated_param_count, trainable_param_count(cfg)) << to_string(m);
  }
}

TEST(Training, FrozenProjectionUntouched) {
  const PromptConfig cfg{3, 2, 6, Seed{1}, Mode::ulpt};
  const auto run = train(quadratic_to(gaussian_matrix(Seed{9}, 3, 6, 1.0)), cfg, {},
                         {0.05, 0, 50, ScheduleKind::constant}, Seed{2});
  EXPECT_EQ(run.final_state.proj.p, build_projection(cfg).p);
}

TEST(Training, NonFiniteLossThrowsWithPartialTrace) {
  const PromptConfig cfg{2, 1, 3, Seed{1}, Mode::ulpt};
  const LossFn bad = [](const Matrix& e, std::size_t step) {
    LossEval le = quadratic_pl_loss(e, Matrix(e.rows(), e.cols()));
    if (step == 4) le.loss = std::nan("");
    return le;
  };
  try {
    train(bad, cfg, {}, {0.01, 0, 10, ScheduleKind::constant}, Seed{2});
    FAIL() << "expected divergence";
  } catch (const TrainDiverged& e) {
    EXPECT_EQ(e.run().trace.size(), 4u);
  }
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  Optimizer opt(OptimizerConfig{});
  std::vector<double> x{1.0, -2.0};
  const std::vector<double> g{0.3, -5.0};
  opt.step({std::span<double>(x)}, {std::span<const double>(g)}, 0.1);
  EXPECT_NEAR(x[0], 0.9, 1e-6);
  EXPECT_NEAR(x[1], -1.9, 1e-6);
}

TEST(AdamW, WeightDecayIsDecoupled) {
  OptimizerConfig cfg;
  cfg.weight_decay = 0.5;
  Optimizer opt(cfg);
  std::vector<double> x{2.0};
  const std::vector<double> g{0.0};
  opt.step({std::span<double>(x)}, {std::span<const double>(g)}, 0.1);
  EXPECT_DOUBLE_EQ(x[0], 2.0 - 0.1 * 0.5 * 2.0);
}

TEST(Optimizer, RejectsBadConfig) {
  OptimizerConfig cfg;
  cfg.beta1 = 1.0;
  EXPECT_THROW(Optimizer{cfg}, ConfigError);
  cfg = {};
  cfg.line_search = true;
  EXPECT_THROW(Optimizer{cfg}, ConfigError);
  EXPECT_THROW(optimizer_from_string("sgd"), ConfigError);
}

TEST(ClampScale, KeepsSignAndCountsEvents) {
  Vector s{0.0, -1e-12, 1e-9, 0.5, -2e-8};
  EXPECT_EQ(clamp_scale(s), 3u);
  EXPECT_EQ(s, (Vector{1e-8, -1e-8, 1e-8, 0.5, -2e-8}));
  EXPECT_EQ(clamp_scale(s), 0u);
}

TEST(Curvature, KnownQuadraticAndSafeRate) {
  // Vanilla prompts make the loss 1/2‖Z - E*‖², whose Hessian is the identity.
  const PromptConfig cfg{3, 0, 4, Seed{1}, Mode::vanilla_pt};
  const PromptState st = init_state(cfg, Seed{2});
  const LossFn loss = quadratic_to(gaussian_matrix(Seed{3}, 3, 4, 1.0));
  EXPECT_NEAR(estimate_curvature(st, loss, Seed{4}), 1.0, 1e-6);
  EXPECT_NEAR(descent_safe_lr(st, loss, Seed{4}), 0.9, 1e-6);
}

TEST(Curvature, ZeroLossThrowsForSafeRate) {
  const PromptConfig cfg{2, 0, 2, Seed{1}, Mode::vanilla_pt};
  const LossFn flat = [](const Matrix& e, std::size_t) { return LossEval{0.0, Matrix(e.rows(), e.cols())}; };
  EXPECT_THROW(descent_safe_lr(init_state(cfg, Seed{1}), flat, Seed{2}), DomainError);
}

TEST(Monotone, SlackIsRelativeToInitialLoss) {
  std::vector<TraceRow> t{{0, 0.1, 1.0, {}}, {1, 0.1, 0.5, {}}, {2, 0.1, 0.5 + 1e-13, {}}};
  EXPECT_TRUE(is_monotone_nonincreasing(t));
  t.push_back({3, 0.1, 0.6, {}});
  EXPECT_FALSE(is_monotone_nonincreasing(t));
  EXPECT_TRUE(is_monotone_nonincreasing({}));
}

TEST(Harness, ConvergesMonotonically) {
  for (Mode m : {Mode::ulpt, Mode::ulpt_no_scale, Mode::ulpt_no_shift_no_scale}) {
    const auto h = quadratic_harness({6, 3, 12, Seed{1}, m}, Seed{2}, Seed{3}, 5000);
    EXPECT_TRUE(h.monotone) << to_string(m);
    EXPECT_LT(*h.run.final_loss, 1e-6) << to_string(m);
    EXPECT_TRUE(h.first_step_below.has_value());
    EXPECT_NEAR(h.lr, 0.9 / h.curvature, 1e-9 / h.curvature);
  }
}

TEST(Harness, LineSearchAlsoDescends) {
  const auto h = quadratic_harness({4, 2, 8, Seed{1}, Mode::ulpt}, Seed{2}, Seed{3}, 500, true);
  EXPECT_TRUE(h.monotone);
  EXPECT_LT(*h.run.final_loss, h.run.trace.front().loss);
}
