#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "ulpt/toy_task.hpp"

using namespace ulpt;
using namespace ulpt::toy;

namespace {

ToyTaskConfig small_task() {
  ToyTaskConfig c;
  c.model.d = 8;
  c.model.ffn = 16;
  c.model.seq_len = 5;
  c.model.vocab = 16;
  c.train_size = 8;
  c.eval_size = 200;
  c.batch_size = 4;
  return c;
}

}  // namespace

TEST(ToyModel, InputGradientMatchesFiniteDifferences) {
  const ToyTask task(small_task(), Seed{1});
  const Matrix prompt = gaussian_matrix(Seed{2}, 2, 8, 1.0);
  const auto le = task.batch_loss(prompt, 0, 3);
  const auto fd = oracle::fd_gradient(
      [&](const std::vector<double>& x) {
        Matrix p(2, 8);
        p.data() = x;
        return task.forward_nll(p, 0, 3);
      },
      prompt.data(), 1e-5);
  double worst = 0.0;
  for (std::size_t i = 0; i < fd.size(); ++i) {
    const double scale = std::max({std::abs(fd[i]), std::abs(le.d_e.data()[i]), 1e-6});
    worst = std::max(worst, std::abs(fd[i] - le.d_e.data()[i]) / scale);
  }
  EXPECT_LT(worst, 1e-5);
}

TEST(ToyModel, LossMatchesForwardOnlyPath) {
  const ToyTask task(small_task(), Seed{3});
  const Matrix prompt = gaussian_matrix(Seed{4}, 3, 8, 1.0);
  EXPECT_NEAR(task.batch_loss(prompt, 2, 5).loss, task.forward_nll(prompt, 2, 5), 1e-10);
}

TEST(ToyModel, WeightsStayFrozenDuringPromptTraining) {
  ToyTaskConfig cfg = small_task();
  const ToyTask task(cfg, Seed{5});
  const ToyWeights before = task.model().weights();
  toy_task_run(task, {2, 2, 8, Seed{6}, Mode::ulpt}, {}, {0.05, 2, 20, ScheduleKind::linear_warmup_decay},
               Seed{7});
  EXPECT_TRUE(task.model().weights() == before);
}

TEST(ToyModel, SameSeedSameWeights) {
  ToyModelConfig a;
  a.seed = Seed{11};
  EXPECT_TRUE(ToyModel(a).weights() == ToyModel(a).weights());
  ToyModelConfig b = a;
  b.seed = Seed{12};
  EXPECT_FALSE(ToyModel(a).weights() == ToyModel(b).weights());
}

TEST(ToyModel, UntrainedPromptNearChance) {
  const ToyTask task(shifted_task_config(), Seed{5});
  const Matrix prompt = init_state({4, 2, 32, Seed{11}, Mode::ulpt}, Seed{3}).forward();
  EXPECT_NEAR(task.eval_accuracy(prompt), 0.25, 0.1);
}

TEST(ToyModel, RejectsBadShapes) {
  const ToyTask task(small_task(), Seed{1});
  EXPECT_THROW(task.batch_loss(Matrix(2, 7), 0, 1), DimensionError);
  EXPECT_THROW(task.model().embed(std::vector<std::uint32_t>{1, 2}), DimensionError);
  ToyModelConfig bad;
  bad.heads = 3;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Dataset, BalancedWithOneMarkerEach) {
  ToyModelConfig cfg;
  const auto data = make_dataset(cfg, 400, Seed{8});
  std::vector<int> per_class(cfg.num_classes, 0);
  for (const auto& ex : data) {
    ++per_class[ex.label];
    int markers = 0;
    for (auto t : ex.tokens) {
      ASSERT_LT(t, cfg.vocab);
      if (t < cfg.num_classes) {
        ++markers;
        EXPECT_EQ(t, ex.label);
      }
    }
    EXPECT_EQ(markers, 1);
  }
  for (int c : per_class) EXPECT_EQ(c, 100);
}

TEST(ToyTask, TrainingReducesLoss) {
  const ToyTask task(small_task(), Seed{9});
  const auto run = toy_task_run(task, {2, 2, 8, Seed{6}, Mode::ulpt}, {},
                                {0.05, 10, 200, ScheduleKind::linear_warmup_decay}, Seed{7});
  const double before = task.full_loss_fn()(init_state({2, 2, 8, Seed{6}, Mode::ulpt}, Seed{7}).forward(), 0).loss;
  EXPECT_LT(*run.final_loss, before);
  ASSERT_TRUE(run.final_eval_metric.has_value());
  EXPECT_GE(*run.final_eval_metric, 0.0);
  EXPECT_LE(*run.final_eval_metric, 1.0);
}
