#pragma once

// Prompt parameterizations: the frozen-random-projection prompt with learned
// per-dimension scale and shift (ULPT), its ablations, full-dimension prompt
// tuning, a learnable up-projection baseline and the "tune P, freeze Z"
// alternative. Forward maps trainables to the n x d prompt; backward maps
// dL/dE back onto the trainables of the active mode.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "ulpt/numerics.hpp"

namespace ulpt {

enum class Mode : std::uint8_t {
  ulpt = 0,
  ulpt_no_scale = 1,
  ulpt_no_shift_no_scale = 2,
  vanilla_pt = 3,
  dpt_learnable_p = 4,
  tune_p_frozen_z = 5,
};

inline constexpr Mode kAllModes[] = {Mode::ulpt,       Mode::ulpt_no_scale,   Mode::ulpt_no_shift_no_scale,
                                     Mode::vanilla_pt, Mode::dpt_learnable_p, Mode::tune_p_frozen_z};

inline std::string_view to_string(Mode m) {
  switch (m) {
    case Mode::ulpt: return "ulpt";
    case Mode::ulpt_no_scale: return "ulpt_no_scale";
    case Mode::ulpt_no_shift_no_scale: return "ulpt_no_shift_no_scale";
    case Mode::vanilla_pt: return "vanilla_pt";
    case Mode::dpt_learnable_p: return "dpt_learnable_p";
    case Mode::tune_p_frozen_z: return "tune_p_frozen_z";
  }
  throw ConfigError("unknown mode");
}

inline Mode mode_from_string(std::string_view s) {
  for (Mode m : kAllModes)
    if (to_string(m) == s) return m;
  throw ConfigError("unknown mode '" + std::string(s) + "'");
}

inline Mode mode_from_byte(std::uint8_t b) {
  if (b > static_cast<std::uint8_t>(Mode::tune_p_frozen_z))
    throw ConfigError("unknown mode byte " + std::to_string(b));
  return static_cast<Mode>(b);
}

inline constexpr bool has_scale(Mode m) { return m == Mode::ulpt || m == Mode::tune_p_frozen_z; }
inline constexpr bool has_shift(Mode m) {
  return m == Mode::ulpt || m == Mode::ulpt_no_scale || m == Mode::tune_p_frozen_z;
}
inline constexpr bool is_low_rank(Mode m) { return m != Mode::vanilla_pt; }
inline constexpr bool trains_z(Mode m) { return m != Mode::tune_p_frozen_z; }
inline constexpr bool trains_projection(Mode m) {
  return m == Mode::dpt_learnable_p || m == Mode::tune_p_frozen_z;
}

// Closed-form count of trainable scalars per task.
inline std::size_t param_count(Mode mode, std::size_t n, std::size_t r, std::size_t d) {
  switch (mode) {
    case Mode::ulpt: return n * r + 2 * d;
    case Mode::ulpt_no_scale: return n * r + d;
    case Mode::ulpt_no_shift_no_scale: return n * r;
    case Mode::vanilla_pt: return n * d;
    case Mode::dpt_learnable_p: return n * r + r * d;
    case Mode::tune_p_frozen_z: return r * d + 2 * d;
  }
  throw ConfigError("unknown mode");
}

// Largest rank whose per-task count fits `budget` when tuning Z (full ULPT:
// nr + 2d) or P (tune_p_frozen_z: rd + 2d).
inline std::size_t solve_rank_for_budget(Mode mode, std::size_t budget, std::size_t n, std::size_t d) {
  if (n == 0 || d == 0) throw ConfigError("budget: n and d must be >= 1");
  std::size_t per_rank = 0;
  switch (mode) {
    case Mode::ulpt: per_rank = n; break;
    case Mode::tune_p_frozen_z: per_rank = d; break;
    default: throw ConfigError("budget: only ulpt (tune Z) and tune_p_frozen_z (tune P) are solvable");
  }
  if (budget < 2 * d + per_rank)
    throw InfeasibleBudgetError("budget " + std::to_string(budget) + " is below the minimum " +
                                std::to_string(2 * d + per_rank) + " for " + std::string(to_string(mode)));
  return (budget - 2 * d) / per_rank;
}

struct PromptConfig {
  std::size_t n = 0;  // prompt tokens
  std::size_t r = 0;  // low dimension; ignored by vanilla_pt
  std::size_t d = 0;  // model dimension
  Seed seed{};
  Mode mode = Mode::ulpt;

  // Width of the Z matrix actually stored: r, or d for vanilla prompts.
  std::size_t z_cols() const { return is_low_rank(mode) ? r : d; }

  void validate() const {
    if (n == 0 || d == 0) throw ConfigError("prompt config: n and d must be >= 1");
    if (is_low_rank(mode)) {
      if (r == 0) throw ConfigError("prompt config: r must be >= 1");
      if (r > d)
        throw ConfigError("prompt config: r (" + std::to_string(r) + ") > d (" + std::to_string(d) + ")");
    }
  }
};

inline std::size_t trainable_param_count(const PromptConfig& c) { return param_count(c.mode, c.n, c.r, c.d); }

// The r x d up-projection. `seed` is the seed that produced `p` (after any
// rank-deficiency resampling); `frozen` is false when the trainer owns it.
struct ProjectionMatrix {
  Matrix p;
  Seed seed{};
  bool frozen = true;

  // Arbitrary matrix; used for identity isometries in tests and for loading
  // learned projections.
  static ProjectionMatrix from_matrix(Matrix m, bool frozen = false) {
    return ProjectionMatrix{std::move(m), Seed{}, frozen};
  }
};

// Entries N(0, 1/r) from `seed`; on the measure-zero event that the draw is
// rank deficient, retries with seed+1, seed+2, ...
inline ProjectionMatrix sample_full_rank_projection(Seed seed, std::size_t r, std::size_t d) {
  if (r == 0 || d == 0) throw DimensionError("projection: zero dimension");
  if (r > d) throw ConfigError("projection: r > d");
  for (std::uint64_t attempt = 0; attempt < 64; ++attempt) {
    const Seed s{seed.value + attempt};
    Matrix p = gaussian_matrix(s, r, d, 1.0 / static_cast<double>(r));
    if (rank_and_spectral_extremes(p).rank == r) return ProjectionMatrix{std::move(p), s, true};
  }
  throw ConfigError("projection: no full-rank draw in 64 attempts");
}

// Frozen projection of a low-rank config. For dpt_learnable_p the same draw
// is the initialization of the learned P.
inline ProjectionMatrix build_projection(const PromptConfig& config) {
  config.validate();
  if (!is_low_rank(config.mode)) throw ConfigError("build_projection: mode has no projection");
  auto proj = sample_full_rank_projection(config.seed, config.r, config.d);
  proj.frozen = !trains_projection(config.mode);
  return proj;
}

struct UlptParams {
  Matrix z;  // n x r (n x d for vanilla prompts)
  Vector s;  // d
  Vector b;  // d
};

// Z ~ N(0, 1/r), s = 1, b = 0. The initial prompt is a plain projection of Z.
// Vanilla prompts use N(0, 1/d), the entry variance of Z P at r = d.
inline UlptParams init_params(const PromptConfig& config, Seed seed) {
  config.validate();
  const std::size_t width = config.z_cols();
  const double var = 1.0 / static_cast<double>(is_low_rank(config.mode) ? config.r : config.d);
  return UlptParams{gaussian_matrix(seed, config.n, width, var), Vector(config.d, 1.0), Vector(config.d, 0.0)};
}

namespace detail {
inline void check_shapes(const UlptParams& params, const ProjectionMatrix& proj, Mode mode) {
  const std::size_t d = params.s.size();
  if (params.b.size() != d) throw DimensionError("params: s and b lengths differ");
  if (is_low_rank(mode)) {
    if (proj.p.rows() != params.z.cols() || proj.p.cols() != d)
      throw DimensionError("params: Z is " + std::to_string(params.z.rows()) + "x" +
                           std::to_string(params.z.cols()) + ", P is " + std::to_string(proj.p.rows()) + "x" +
                           std::to_string(proj.p.cols()) + ", d = " + std::to_string(d));
  } else if (params.z.cols() != d) {
    throw DimensionError("params: vanilla prompt width != d");
  }
}
}  // namespace detail

// e_ij = (sum_k z_ik p_kj) * s_j + b_j. Modes without scale read s as 1,
// modes without shift read b as 0; vanilla prompts return Z itself.
inline Matrix up_project(const UlptParams& params, const ProjectionMatrix& proj, Mode mode = Mode::ulpt) {
  detail::check_shapes(params, proj, mode);
  if (!is_low_rank(mode)) return params.z;
  Matrix e = matmul(params.z, proj.p);
  const bool scale = has_scale(mode);
  const bool shift = has_shift(mode);
  if (!scale && !shift) return e;
  for (std::size_t i = 0; i < e.rows(); ++i) {
    auto row = e.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) {
      if (scale) row[j] *= params.s[j];
      if (shift) row[j] += params.b[j];
    }
  }
  return e;
}

// Gradients of the active mode's trainables. Members for frozen parameters
// are left empty.
struct GradientBundle {
  Matrix d_z;
  Vector d_s;
  Vector d_b;
  std::optional<Matrix> d_p;
};

inline GradientBundle backward(const UlptParams& params, const ProjectionMatrix& proj, const Matrix& d_e,
                               Mode mode = Mode::ulpt) {
  detail::check_shapes(params, proj, mode);
  const std::size_t n = params.z.rows();
  const std::size_t d = params.s.size();
  if (d_e.rows() != n || d_e.cols() != d) throw DimensionError("backward: dL/dE shape mismatch");

  GradientBundle g;
  if (!is_low_rank(mode)) {
    g.d_z = d_e;
    return g;
  }

  const bool scale = has_scale(mode);
  // dL/d(ZP) entrywise: d_e[i,j] * s_j
  Matrix d_proj_out = d_e;
  if (scale)
    for (std::size_t i = 0; i < n; ++i) {
      auto row = d_proj_out.row(i);
      for (std::size_t j = 0; j < d; ++j) row[j] *= params.s[j];
    }

  if (trains_z(mode)) g.d_z = matmul_nt(d_proj_out, proj.p);  // z_i gets P diag(s) dL/de_i
  if (trains_projection(mode)) g.d_p = matmul_tn(params.z, d_proj_out);

  if (has_shift(mode)) {
    g.d_b.assign(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) g.d_b[j] += d_e(i, j);
  }
  if (scale) {
    const Matrix zp = matmul(params.z, proj.p);  // row i is (P^T z_i)^T
    g.d_s.assign(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) g.d_s[j] += zp(i, j) * d_e(i, j);
  }
  return g;
}

// Everything a trainer needs for one prompt: trainables plus the projection.
struct PromptState {
  PromptConfig config;
  UlptParams params;
  ProjectionMatrix proj;

  Matrix forward() const { return up_project(params, proj, config.mode); }
  GradientBundle backward(const Matrix& d_e) const { return ulpt::backward(params, proj, d_e, config.mode); }
};

// Initial state of a run. config.seed names the frozen random component: the
// projection for the ULPT family (the initial P for dpt_learnable_p) and Z
// for tune_p_frozen_z. run_seed draws everything that is trained.
inline PromptState init_state(const PromptConfig& config, Seed run_seed) {
  config.validate();
  PromptState st{config, init_params(config, run_seed), {}};
  switch (config.mode) {
    case Mode::vanilla_pt:
      st.proj.frozen = true;
      break;
    case Mode::tune_p_frozen_z:
      st.params.z = gaussian_matrix(config.seed, config.n, config.r, 1.0 / static_cast<double>(config.r));
      st.proj = ProjectionMatrix{gaussian_matrix(derive_seed(run_seed, 1), config.r, config.d,
                                                 1.0 / static_cast<double>(config.r)),
                                 Seed{}, false};
      break;
    default:
      st.proj = build_projection(config);
      break;
  }
  return st;
}

// Mutable views of the trainables in the fixed order b, s, Z, P (frozen
// members skipped). Total length equals param_count for the mode.
inline std::vector<std::span<double>> trainable_spans(PromptState& st) {
  const Mode m = st.config.mode;
  std::vector<std::span<double>> out;
  if (has_shift(m)) out.emplace_back(st.params.b);
  if (has_scale(m)) out.emplace_back(st.params.s);
  if (trains_z(m)) out.emplace_back(st.params.z.data());
  if (trains_projection(m)) out.emplace_back(st.proj.p.data());
  return out;
}

// Gradient views in the same order as trainable_spans.
inline std::vector<std::span<const double>> gradient_spans(const GradientBundle& g, Mode m) {
  std::vector<std::span<const double>> out;
  if (has_shift(m)) out.emplace_back(g.d_b);
  if (has_scale(m)) out.emplace_back(g.d_s);
  if (trains_z(m)) out.emplace_back(g.d_z.data());
  if (trains_projection(m)) out.emplace_back(g.d_p->data());
  return out;
}

// Prompt rows first, then the input token embeddings.
inline Matrix assemble_input(const Matrix& prompt, const Matrix& tokens) {
  if (prompt.rows() > 0 && tokens.rows() > 0 && prompt.cols() != tokens.cols())
    throw DimensionError("assemble_input: prompt d != token d");
  return vstack(prompt, tokens);
}

}  // namespace ulpt
