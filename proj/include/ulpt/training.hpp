#pragma once

// Optimizers, the warmup + linear-decay schedule, the quadratic harness with
// reachable targets, and the generic prompt training loop.

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ulpt/numerics.hpp"
#include "ulpt/reparam.hpp"

namespace ulpt {

// ---------------------------------------------------------------------------
// Schedule
// ---------------------------------------------------------------------------

enum class ScheduleKind { linear_warmup_decay, constant };

struct ScheduleConfig {
  double peak_lr = 0.6;
  std::size_t warmup_steps = 500;
  std::size_t total_steps = 5000;
  ScheduleKind kind = ScheduleKind::linear_warmup_decay;

  void validate() const {
    if (!(peak_lr >= 0.0) || !std::isfinite(peak_lr)) throw ConfigError("schedule: peak_lr must be >= 0");
  }

  // Rate for update t: linear ramp to peak at t = warmup_steps, then linear
  // decay to 0 at t = total_steps. A warmup longer than the run just ramps.
  double lr(std::size_t t) const {
    if (kind == ScheduleKind::constant) return peak_lr;
    if (t >= total_steps) return 0.0;
    if (t <= warmup_steps) {
      if (warmup_steps == 0) return peak_lr;
      return peak_lr * static_cast<double>(t) / static_cast<double>(warmup_steps);
    }
    return peak_lr * static_cast<double>(total_steps - t) / static_cast<double>(total_steps - warmup_steps);
  }
};

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

enum class OptimizerKind { gd, adamw };

inline std::string_view to_string(OptimizerKind k) { return k == OptimizerKind::gd ? "gd" : "adamw"; }

inline OptimizerKind optimizer_from_string(std::string_view s) {
  if (s == "gd") return OptimizerKind::gd;
  if (s == "adamw") return OptimizerKind::adamw;
  throw ConfigError("unknown optimizer '" + std::string(s) + "'");
}

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adamw;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  // GD only: backtracking from the scheduled rate until the Armijo condition
  // L(x - a g) <= L(x) - armijo_c a ‖g‖^2 holds.
  bool line_search = false;
  double armijo_c = 1e-4;

  void validate() const {
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw ConfigError("optimizer: betas must be in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("optimizer: eps must be > 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("optimizer: weight_decay must be >= 0");
    if (line_search && kind != OptimizerKind::gd) throw ConfigError("optimizer: line search requires gd");
  }
};

// First-order optimizer state over a flat list of parameter spans.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  // Applies one update with rate lr. Returns the number of scalars written.
  std::size_t step(const std::vector<std::span<double>>& params, const std::vector<std::span<const double>>& grads,
                   double lr) {
    if (params.size() != grads.size()) throw DimensionError("optimizer: parameter/gradient group mismatch");
    std::size_t total = 0;
    for (std::size_t g = 0; g < params.size(); ++g) {
      if (params[g].size() != grads[g].size()) throw DimensionError("optimizer: group size mismatch");
      total += params[g].size();
    }
    if (cfg_.kind == OptimizerKind::gd) {
      for (std::size_t g = 0; g < params.size(); ++g)
        for (std::size_t i = 0; i < params[g].size(); ++i) params[g][i] -= lr * grads[g][i];
      return total;
    }

    if (m_.empty()) {
      m_.assign(total, 0.0);
      v_.assign(total, 0.0);
    } else if (m_.size() != total) {
      throw DimensionError("optimizer: parameter count changed between steps");
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    std::size_t k = 0;
    for (std::size_t g = 0; g < params.size(); ++g) {
      for (std::size_t i = 0; i < params[g].size(); ++i, ++k) {
        const double grad = grads[g][i];
        m_[k] = cfg_.beta1 * m_[k] + (1.0 - cfg_.beta1) * grad;
        v_[k] = cfg_.beta2 * v_[k] + (1.0 - cfg_.beta2) * grad * grad;
        const double mhat = m_[k] / bc1;
        const double vhat = v_[k] / bc2;
        double& x = params[g][i];
        x -= lr * cfg_.weight_decay * x;
        x -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
    return total;
  }

  const OptimizerConfig& config() const { return cfg_; }

 private:
  OptimizerConfig cfg_;
  std::vector<double> m_, v_;
  std::size_t t_ = 0;
};

// Keeps every scale entry at least 1e-8 away from zero (sign of 0 taken as
// +). Returns the number of entries moved.
inline std::size_t clamp_scale(Vector& s, double floor = 1e-8) {
  std::size_t events = 0;
  for (double& x : s) {
    if (std::abs(x) < floor) {
      x = std::signbit(x) ? -floor : floor;
      ++events;
    }
  }
  return events;
}

// ---------------------------------------------------------------------------
// Quadratic harness
// ---------------------------------------------------------------------------

struct LossEval {
  double loss = 0.0;
  Matrix d_e;  // dL/dE, same shape as the prompt
};

// L = 1/2 ‖E - E*‖_F^2, dL/dE = E - E*.
inline LossEval quadratic_pl_loss(const Matrix& e_hat, const Matrix& target) {
  if (e_hat.rows() != target.rows() || e_hat.cols() != target.cols())
    throw DimensionError("quadratic_pl_loss: shape mismatch");
  LossEval out{0.0, e_hat - target};
  double acc = 0.0;
  for (double x : out.d_e.data()) acc += x * x;
  out.loss = 0.5 * acc;
  return out;
}

struct ReachableTarget {
  Matrix target;
  UlptParams generator;  // parameters whose forward pass is exactly `target`
};

// E* = up_project(Z*, s*, b*) through the config's own frozen projection, so
// the global minimum of the quadratic loss is 0. Z* ~ N(0, 1/r),
// s* ~ U[0.5, 1.5] and b* ~ N(0, 1); ablated components stay at 1 / 0.
inline ReachableTarget make_reachable_target(const PromptConfig& config, Seed target_seed) {
  config.validate();
  if (!is_low_rank(config.mode) || trains_projection(config.mode))
    throw ConfigError("make_reachable_target: requires a frozen-projection mode");
  const ProjectionMatrix proj = build_projection(config);
  UlptParams gen;
  gen.z = gaussian_matrix(derive_seed(target_seed, 0), config.n, config.r, 1.0 / static_cast<double>(config.r));
  gen.s.assign(config.d, 1.0);
  gen.b.assign(config.d, 0.0);
  if (has_scale(config.mode)) {
    Rng rng(derive_seed(target_seed, 1));
    for (double& x : gen.s) x = rng.uniform(0.5, 1.5);
  }
  if (has_shift(config.mode)) gen.b = gaussian_vector(derive_seed(target_seed, 2), config.d, 1.0);
  Matrix target = up_project(gen, proj, config.mode);
  return {std::move(target), std::move(gen)};
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

// Loss of a prompt at update index `step` (lets stochastic objectives pick a
// minibatch); must be deterministic in (prompt, step).
using LossFn = std::function<LossEval(const Matrix& prompt, std::size_t step)>;
using EvalFn = std::function<double(const Matrix& prompt)>;

struct TraceRow {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  std::optional<double> eval_metric;
};

struct TrainRun {
  PromptConfig prompt;
  OptimizerConfig optimizer;
  ScheduleConfig schedule;
  Seed run_seed{};
  std::vector<TraceRow> trace;
  PromptState final_state;
  std::optional<double> final_loss;
  std::optional<double> final_eval_metric;
  std::size_t clamp_event_count = 0;
  std::size_t updated_param_count = 0;  // scalars written per optimizer step
  std::size_t line_search_backtracks = 0;
};

class TrainDiverged : public DivergedError {
 public:
  TrainDiverged(const std::string& what, TrainRun run) : DivergedError(what), run_(std::move(run)) {}
  const TrainRun& run() const { return run_; }

 private:
  TrainRun run_;
};

struct TrainOptions {
  EvalFn eval;                // optional held-out metric
  std::size_t eval_every = 0;  // 0: only after the last step
  LossFn final_loss;          // optional; defaults to loss(prompt, total_steps)
};

namespace detail {
inline double squared_norm(const std::vector<std::span<const double>>& groups) {
  double acc = 0.0;
  for (auto g : groups)
    for (double x : g) acc += x * x;
  return acc;
}
}  // namespace detail

// Forward -> loss -> backward -> optimizer step, with scale clamping after
// every update. Trains the given initial state in place of a fresh one.
inline TrainRun train_from(PromptState state, const LossFn& loss_fn, const OptimizerConfig& opt,
                           const ScheduleConfig& sched, Seed run_seed, const TrainOptions& options = {}) {
  state.config.validate();
  opt.validate();
  sched.validate();

  TrainRun run;
  run.prompt = state.config;
  run.optimizer = opt;
  run.schedule = sched;
  run.run_seed = run_seed;
  run.updated_param_count = 0;
  const Mode mode = state.config.mode;
  Optimizer optimizer(opt);

  auto eval_at = [&](const Matrix& prompt) -> std::optional<double> {
    if (!options.eval) return std::nullopt;
    return options.eval(prompt);
  };

  for (std::size_t t = 0; t < sched.total_steps; ++t) {
    const double lr = sched.lr(t);
    const Matrix prompt = state.forward();
    LossEval le = loss_fn(prompt, t);
    TraceRow row{t, lr, le.loss, std::nullopt};
    if (options.eval && options.eval_every > 0 && t % options.eval_every == 0) row.eval_metric = eval_at(prompt);
    if (!std::isfinite(le.loss)) {
      run.final_state = state;
      throw TrainDiverged("training diverged at step " + std::to_string(t), std::move(run));
    }
    run.trace.push_back(row);

    const GradientBundle grad = state.backward(le.d_e);
    const auto g = gradient_spans(grad, mode);
    auto p = trainable_spans(state);

    double step_lr = lr;
    if (opt.line_search && lr > 0.0) {
      const double g2 = detail::squared_norm(g);
      const PromptState start = state;
      for (int k = 0; k < 60; ++k) {
        state = start;
        auto trial = trainable_spans(state);
        for (std::size_t gi = 0; gi < trial.size(); ++gi)
          for (std::size_t i = 0; i < trial[gi].size(); ++i) trial[gi][i] -= step_lr * g[gi][i];
        const double trial_loss = loss_fn(state.forward(), t).loss;
        if (std::isfinite(trial_loss) && trial_loss <= le.loss - opt.armijo_c * step_lr * g2) break;
        step_lr *= 0.5;
        ++run.line_search_backtracks;
      }
      state = start;
      p = trainable_spans(state);
    }
    run.updated_param_count = optimizer.step(p, g, step_lr);
    if (has_scale(mode)) run.clamp_event_count += clamp_scale(state.params.s);
  }

  const Matrix prompt = state.forward();
  const double fl = options.final_loss ? options.final_loss(prompt, sched.total_steps).loss
                                       : loss_fn(prompt, sched.total_steps).loss;
  if (!std::isfinite(fl)) {
    run.final_state = state;
    throw TrainDiverged("final loss is not finite", std::move(run));
  }
  run.final_loss = fl;
  run.final_eval_metric = eval_at(prompt);
  run.final_state = std::move(state);
  return run;
}

inline TrainRun train(const LossFn& loss_fn, const PromptConfig& config, const OptimizerConfig& opt,
                      const ScheduleConfig& sched, Seed run_seed, const TrainOptions& options = {}) {
  return train_from(init_state(config, run_seed), loss_fn, opt, sched, run_seed, options);
}

// ---------------------------------------------------------------------------
// Curvature
// ---------------------------------------------------------------------------

// Flat gradient of the trainables of `state` under loss_fn at `step`.
inline std::vector<double> flat_gradient(const PromptState& state, const LossFn& loss_fn, std::size_t step = 0) {
  const LossEval le = loss_fn(state.forward(), step);
  const GradientBundle g = state.backward(le.d_e);
  std::vector<double> out;
  for (auto span : gradient_spans(g, state.config.mode)) out.insert(out.end(), span.begin(), span.end());
  return out;
}

inline void add_to_trainables(PromptState& state, std::span<const double> delta, double alpha) {
  std::size_t k = 0;
  for (auto span : trainable_spans(state))
    for (double& x : span) x += alpha * delta[k++];
}

// Largest |eigenvalue| of the Hessian of the reparameterized loss at
// `state`, by power iteration on central-difference Hessian-vector products.
inline double estimate_curvature(const PromptState& state, const LossFn& loss_fn, Seed seed,
                                 std::size_t iterations = 100, double h = 1e-5) {
  std::size_t dim = 0;
  {
    PromptState tmp = state;
    for (auto s : trainable_spans(tmp)) dim += s.size();
  }
  if (dim == 0) return 0.0;
  Rng rng(seed);
  std::vector<double> v(dim);
  for (double& x : v) x = rng.normal();
  double nv = norm2(v);
  for (double& x : v) x /= nv;

  double lambda = 0.0;
  for (std::size_t it = 0; it < iterations; ++it) {
    PromptState plus = state, minus = state;
    add_to_trainables(plus, v, h);
    add_to_trainables(minus, v, -h);
    const auto gp = flat_gradient(plus, loss_fn);
    const auto gm = flat_gradient(minus, loss_fn);
    std::vector<double> hv(dim);
    for (std::size_t i = 0; i < dim; ++i) hv[i] = (gp[i] - gm[i]) / (2.0 * h);
    const double nhv = norm2(hv);
    if (nhv == 0.0) return 0.0;
    lambda = nhv;
    for (std::size_t i = 0; i < dim; ++i) v[i] = hv[i] / nhv;
  }
  return lambda;
}

// Descent-lemma step size 0.9 / L̂ for the curvature at `state`.
inline double descent_safe_lr(const PromptState& state, const LossFn& loss_fn, Seed seed) {
  const double l = estimate_curvature(state, loss_fn, seed);
  if (!(l > 0.0) || !std::isfinite(l)) throw DomainError("descent_safe_lr: curvature estimate is not positive");
  return 0.9 / l;
}

// loss(t+1) <= loss(t) for every step, up to round-off of rel_tol times the
// initial loss.
inline bool is_monotone_nonincreasing(const std::vector<TraceRow>& trace, double rel_tol = 1e-12) {
  if (trace.empty()) return true;
  const double slack = rel_tol * std::abs(trace.front().loss);
  for (std::size_t t = 1; t < trace.size(); ++t)
    if (trace[t].loss > trace[t - 1].loss + slack) return false;
  return true;
}

struct HarnessRun {
  TrainRun run;
  double curvature = 0.0;
  double lr = 0.0;
  bool monotone = false;
  std::optional<std::size_t> first_step_below;  // first t with loss < threshold
};

// GD on 1/2 ‖E - E*‖^2 with E* reachable, at the constant rate 0.9 / L̂
// estimated at the initial point (optionally with Armijo backtracking).
inline HarnessRun quadratic_harness(const PromptConfig& config, Seed target_seed, Seed run_seed,
                                    std::size_t steps = 5000, bool line_search = false, double threshold = 1e-6) {
  const ReachableTarget tgt = make_reachable_target(config, target_seed);
  const LossFn loss = [target = tgt.target](const Matrix& e, std::size_t) { return quadratic_pl_loss(e, target); };
  const PromptState start = init_state(config, run_seed);
  HarnessRun out;
  out.curvature = estimate_curvature(start, loss, derive_seed(run_seed, 7));
  out.lr = descent_safe_lr(start, loss, derive_seed(run_seed, 7));
  OptimizerConfig opt;
  opt.kind = OptimizerKind::gd;
  opt.line_search = line_search;
  ScheduleConfig sched;
  sched.kind = ScheduleKind::constant;
  sched.peak_lr = out.lr;
  sched.total_steps = steps;
  out.run = train_from(start, loss, opt, sched, run_seed);
  out.monotone = is_monotone_nonincreasing(out.run.trace);
  for (const auto& row : out.run.trace)
    if (row.loss < threshold) {
      out.first_step_below = row.step;
      break;
    }
  if (!out.first_step_below && *out.run.final_loss < threshold) out.first_step_below = steps;
  return out;
}

}  // namespace ulpt
