#pragma once

// Prompt tuning against the frozen toy transformer: only the prompt
// parameters are trained, with the mean negative log-likelihood of the
// correct class as objective.

#include <cmath>
#include <cstdint>
#include <memory>
#include <vector>

#include "ulpt/numerics.hpp"
#include "ulpt/reparam.hpp"
#include "ulpt/toy_model.hpp"
#include "ulpt/training.hpp"

namespace ulpt::toy {

struct ToyTaskConfig {
  ToyModelConfig model{};
  std::size_t train_size = 128;
  std::size_t eval_size = 1000;
  std::size_t batch_size = 16;  // 0: full batch

  void validate() const {
    model.validate();
    if (train_size == 0 || eval_size == 0) throw ConfigError("toy task: empty split");
  }
};

// The shifted-distribution variant: token embeddings carry a large fixed
// per-dimension offset.
inline ToyTaskConfig shifted_task_config() {
  ToyTaskConfig c;
  c.model.embed_offset = 3.0;
  return c;
}

class ToyTask {
 public:
  ToyTask(ToyTaskConfig cfg, Seed task_seed)
      : cfg_(cfg),
        model_(std::make_shared<const ToyModel>([&] {
          ToyModelConfig m = cfg.model;
          m.seed = derive_seed(task_seed, 0);
          return m;
        }())) {
    cfg_.validate();
    cfg_.model = model_->config();
    train_ = make_dataset(cfg_.model, cfg_.train_size, derive_seed(task_seed, 1));
    eval_ = make_dataset(cfg_.model, cfg_.eval_size, derive_seed(task_seed, 2));
    train_embedded_ = embed_all(train_);
    eval_embedded_ = embed_all(eval_);
  }

  const ToyTaskConfig& config() const { return cfg_; }
  const ToyModel& model() const { return *model_; }
  const std::vector<Example>& train_set() const { return train_; }
  const std::vector<Example>& eval_set() const { return eval_; }

  // Mean cross-entropy over train examples [first, first + count) (wrapping)
  // and its gradient with respect to the prompt rows.
  LossEval batch_loss(const Matrix& prompt, std::size_t first, std::size_t count) const {
    check_prompt(prompt);
    LossEval out{0.0, Matrix(prompt.rows(), prompt.cols())};
    Matrix d_input;
    for (std::size_t k = 0; k < count; ++k) {
      const std::size_t idx = (first + k) % train_.size();
      const Matrix input = vstack(prompt, train_embedded_[idx]);
      out.loss += model_->loss_and_input_grad(input, train_[idx].label, d_input);
      for (std::size_t i = 0; i < prompt.rows(); ++i)
        for (std::size_t j = 0; j < prompt.cols(); ++j) out.d_e(i, j) += d_input(i, j);
    }
    const double inv = 1.0 / static_cast<double>(count);
    out.loss *= inv;
    for (double& x : out.d_e.data()) x *= inv;
    return out;
  }

  // Objective at update `step`: consecutive minibatches over the train split.
  LossFn loss_fn() const {
    return [this](const Matrix& prompt, std::size_t step) {
      const std::size_t bs = batch_size();
      return batch_loss(prompt, (step * bs) % train_.size(), bs);
    };
  }

  // Full train-split objective, independent of the step.
  LossFn full_loss_fn() const {
    return [this](const Matrix& prompt, std::size_t) { return batch_loss(prompt, 0, train_.size()); };
  }

  std::size_t batch_size() const {
    return cfg_.batch_size == 0 ? train_.size() : std::min(cfg_.batch_size, train_.size());
  }

  double accuracy(const Matrix& prompt, const std::vector<Example>& split,
                  const std::vector<Matrix>& embedded) const {
    check_prompt(prompt);
    std::size_t correct = 0;
    for (std::size_t e = 0; e < split.size(); ++e) {
      const Vector lg = model_->logits(vstack(prompt, embedded[e]));
      std::size_t best = 0;
      for (std::size_t c = 1; c < lg.size(); ++c)
        if (lg[c] > lg[best]) best = c;
      if (best == split[e].label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(split.size());
  }

  double eval_accuracy(const Matrix& prompt) const { return accuracy(prompt, eval_, eval_embedded_); }

  // Forward-only mean NLL of the correct labels over train examples
  // [first, first + count); shares no code with the gradient path beyond
  // the logits.
  double forward_nll(const Matrix& prompt, std::size_t first, std::size_t count) const {
    double acc = 0.0;
    for (std::size_t k = 0; k < count; ++k) {
      const std::size_t idx = (first + k) % train_.size();
      const Vector lg = model_->logits(vstack(prompt, train_embedded_[idx]));
      double mx = lg[0];
      for (double v : lg) mx = std::max(mx, v);
      double z = 0.0;
      for (double v : lg) z += std::exp(v - mx);
      acc += (mx + std::log(z)) - lg[train_[idx].label];
    }
    return acc / static_cast<double>(count);
  }

 private:
  void check_prompt(const Matrix& prompt) const {
    if (prompt.cols() != cfg_.model.d) throw DimensionError("toy task: prompt width != model d");
  }

  std::vector<Matrix> embed_all(const std::vector<Example>& split) const {
    std::vector<Matrix> out;
    out.reserve(split.size());
    for (const auto& ex : split) out.push_back(model_->embed(ex.tokens));
    return out;
  }

  ToyTaskConfig cfg_;
  std::shared_ptr<const ToyModel> model_;
  std::vector<Example> train_, eval_;
  std::vector<Matrix> train_embedded_, eval_embedded_;
};

// Trains only the prompt of `config` on `task`; eval_metric is held-out
// accuracy, final_loss the full train-split NLL.
inline TrainRun toy_task_run(const ToyTask& task, const PromptConfig& config, const OptimizerConfig& opt,
                             const ScheduleConfig& sched, Seed run_seed, std::size_t eval_every = 0) {
  if (config.d != task.config().model.d) throw ConfigError("toy task: prompt d != model d");
  TrainOptions options;
  options.eval = [&task](const Matrix& prompt) { return task.eval_accuracy(prompt); };
  options.eval_every = eval_every;
  options.final_loss = task.full_loss_fn();
  return train(task.loss_fn(), config, opt, sched, run_seed, options);
}

}  // namespace ulpt::toy
