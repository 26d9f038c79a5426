#pragma once

// Statistics over learned prompts: per-dimension value distributions and
// pairwise cosine similarity of shift / scale vectors across runs.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "ulpt/numerics.hpp"

namespace ulpt::analysis {

// k distinct dimensions of [0, d), drawn by a partial Fisher-Yates shuffle
// from `seed` and returned in ascending order.
inline std::vector<std::size_t> select_dimensions(std::size_t d, std::size_t k, Seed seed) {
  if (k > d) throw DomainError("select_dimensions: k (" + std::to_string(k) + ") > d (" + std::to_string(d) + ")");
  std::vector<std::size_t> idx(d);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.below(d - i)]);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

// Linear-interpolation percentile (q in [0, 100]) of unsorted values.
inline double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw DomainError("percentile: no values");
  if (!(q >= 0.0 && q <= 100.0)) throw DomainError("percentile: q must be in [0, 100]");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

struct DimensionStats {
  std::size_t dim = 0;
  double mean = 0.0;
  double min = 0.0;
  double max = 0.0;
  std::vector<double> percentiles;  // in the order requested
};

// Distribution of column `dim` of the prompt over its n token rows.
inline std::vector<DimensionStats> dimension_stats(const Matrix& prompt, std::span<const std::size_t> dims,
                                                   std::span<const double> percentile_levels) {
  if (prompt.rows() == 0) throw DomainError("dimension_stats: empty prompt");
  std::vector<DimensionStats> out;
  std::vector<double> col(prompt.rows());
  for (std::size_t dim : dims) {
    if (dim >= prompt.cols()) throw DomainError("dimension_stats: dimension out of range");
    for (std::size_t i = 0; i < prompt.rows(); ++i) col[i] = prompt(i, dim);
    DimensionStats st;
    st.dim = dim;
    st.mean = std::accumulate(col.begin(), col.end(), 0.0) / static_cast<double>(col.size());
    st.min = *std::min_element(col.begin(), col.end());
    st.max = *std::max_element(col.begin(), col.end());
    for (double q : percentile_levels) st.percentiles.push_back(percentile(col, q));
    out.push_back(std::move(st));
  }
  return out;
}

struct SpreadSummary {
  double inter_dimension = 0.0;  // population std of the per-dimension means
  double intra_dimension = 0.0;  // mean over dimensions of the within-dimension std
};

inline SpreadSummary spread_summary(const Matrix& prompt, std::span<const std::size_t> dims) {
  if (dims.empty() || prompt.rows() == 0) throw DomainError("spread_summary: nothing to summarize");
  std::vector<double> means;
  double intra = 0.0;
  for (std::size_t dim : dims) {
    double m = 0.0;
    for (std::size_t i = 0; i < prompt.rows(); ++i) m += prompt(i, dim);
    m /= static_cast<double>(prompt.rows());
    double v = 0.0;
    for (std::size_t i = 0; i < prompt.rows(); ++i) v += (prompt(i, dim) - m) * (prompt(i, dim) - m);
    intra += std::sqrt(v / static_cast<double>(prompt.rows()));
    means.push_back(m);
  }
  const double mm = std::accumulate(means.begin(), means.end(), 0.0) / static_cast<double>(means.size());
  double vm = 0.0;
  for (double m : means) vm += (m - mm) * (m - mm);
  return {std::sqrt(vm / static_cast<double>(means.size())), intra / static_cast<double>(dims.size())};
}

// Undefined (nullopt) when either vector is zero.
inline std::optional<double> cosine_similarity(std::span<const double> a, std::span<const double> b) {
  const double na = norm2(a);
  const double nb = norm2(b);
  if (na == 0.0 || nb == 0.0) return std::nullopt;
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

using SimilarityMatrix = std::vector<std::vector<std::optional<double>>>;

inline SimilarityMatrix similarity_matrix(const std::vector<Vector>& vectors) {
  SimilarityMatrix m(vectors.size(), std::vector<std::optional<double>>(vectors.size()));
  for (std::size_t i = 0; i < vectors.size(); ++i)
    for (std::size_t j = 0; j < vectors.size(); ++j) m[i][j] = cosine_similarity(vectors[i], vectors[j]);
  return m;
}

// Mean of the defined off-diagonal entries; nullopt if there are none.
inline std::optional<double> mean_off_diagonal(const SimilarityMatrix& m) {
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m.size(); ++j)
      if (i != j && m[i][j]) {
        sum += *m[i][j];
        ++count;
      }
  if (count == 0) return std::nullopt;
  return sum / static_cast<double>(count);
}

}  // namespace ulpt::analysis
