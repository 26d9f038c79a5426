#pragma once

// Central finite-difference checks of the analytic prompt gradients on
// random small instances, with a quadratic loss against a random target.

#include <algorithm>
#include <cmath>
#include <vector>

#include "ulpt/numerics.hpp"
#include "ulpt/reparam.hpp"
#include "ulpt/training.hpp"

namespace ulpt {

struct GradCheckOptions {
  std::size_t instances = 100;
  std::size_t max_n = 8;
  std::size_t max_r = 4;
  std::size_t max_d = 16;
  double h = 1e-5;
  double min_abs = 1e-8;  // coordinates with |fd| below this are skipped
};

struct GradCheckResult {
  Mode mode = Mode::ulpt;
  std::size_t instances = 0;
  std::size_t coords_checked = 0;
  std::size_t coords_skipped = 0;
  double max_rel_error = 0.0;
};

// L(x+h) - L(x-h) for L = 1/2 ‖E - T‖^2, accumulated entrywise as
// 1/2 (a - c)(a + c) so that small differences are not lost to cancellation.
inline double quadratic_loss_difference(const Matrix& plus, const Matrix& minus, const Matrix& target) {
  double acc = 0.0;
  for (std::size_t k = 0; k < target.data().size(); ++k) {
    const double a = plus.data()[k] - target.data()[k];
    const double c = minus.data()[k] - target.data()[k];
    acc += 0.5 * (a - c) * (a + c);
  }
  return acc;
}

// Relative error max over trainable coordinates of |g - fd| / max(|g|, |fd|).
inline GradCheckResult gradcheck_state(const PromptState& state, const Matrix& target, double h = 1e-5,
                                       double min_abs = 1e-8) {
  GradCheckResult res;
  res.mode = state.config.mode;
  res.instances = 1;
  const LossFn loss = [&target](const Matrix& e, std::size_t) { return quadratic_pl_loss(e, target); };
  const std::vector<double> analytic = flat_gradient(state, loss);

  PromptState probe = state;
  std::size_t k = 0;
  for (auto span : trainable_spans(probe)) {
    for (double& x : span) {
      const double x0 = x;
      x = x0 + h;
      const Matrix ep = probe.forward();
      x = x0 - h;
      const Matrix em = probe.forward();
      x = x0;
      const double fd = quadratic_loss_difference(ep, em, target) / (2.0 * h);
      const double g = analytic[k++];
      if (std::abs(fd) <= min_abs) {
        ++res.coords_skipped;
        continue;
      }
      ++res.coords_checked;
      res.max_rel_error = std::max(res.max_rel_error, std::abs(g - fd) / std::max(std::abs(g), std::abs(fd)));
    }
  }
  return res;
}

// Random instance of `mode`: dimensions uniform in [1, max], s ~ ±U[0.5, 1.5],
// b ~ N(0, 1), target ~ N(0, 1).
inline PromptState random_instance(Mode mode, Seed seed, const GradCheckOptions& opt, Matrix& target) {
  Rng rng(seed);
  PromptConfig c;
  c.mode = mode;
  c.d = 1 + rng.below(opt.max_d);
  c.n = 1 + rng.below(opt.max_n);
  c.r = 1 + rng.below(std::min(opt.max_r, c.d));
  c.seed = derive_seed(seed, 1);
  PromptState st = init_state(c, derive_seed(seed, 2));
  for (double& x : st.params.s) x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.5, 1.5);
  for (double& x : st.params.b) x = rng.normal();
  target = gaussian_matrix(derive_seed(seed, 3), c.n, c.d, 1.0);
  return st;
}

inline GradCheckResult gradcheck_mode(Mode mode, Seed seed, const GradCheckOptions& opt = {}) {
  if (opt.instances == 0 || opt.max_n == 0 || opt.max_r == 0 || opt.max_d == 0)
    throw ConfigError("gradcheck: instances and dimension limits must be >= 1");
  if (!(opt.h > 0.0)) throw ConfigError("gradcheck: h must be > 0");
  GradCheckResult total;
  total.mode = mode;
  for (std::size_t i = 0; i < opt.instances; ++i) {
    Matrix target;
    const PromptState st = random_instance(mode, derive_seed(seed, i), opt, target);
    const GradCheckResult r = gradcheck_state(st, target, opt.h, opt.min_abs);
    ++total.instances;
    total.coords_checked += r.coords_checked;
    total.coords_skipped += r.coords_skipped;
    total.max_rel_error = std::max(total.max_rel_error, r.max_rel_error);
  }
  return total;
}

}  // namespace ulpt
