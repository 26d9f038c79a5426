#pragma once

// Empirical checks of the random-projection expressiveness results: the rank
// needed for a pairwise-distance guarantee, measured pairwise distortion of a
// projection, Monte Carlo estimates of the single-vector tail and a fit of
// the tail's decay constant.
//
// Normalization: the tail is stated for a standard Gaussian A with a 1/sqrt(r)
// factor, the distortion statistics for P with N(0, 1/r) entries. A/sqrt(r)
// and P have the same distribution, so both are sampled here as N(0, 1/r).

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "ulpt/numerics.hpp"
#include "ulpt/reparam.hpp"

namespace ulpt::jl {

struct JlQuery {
  double epsilon = 0.5;
  double delta = 0.05;
  std::size_t n = 2;
  double c = 1.0;

  void validate() const {
    if (!(epsilon > 0.0 && epsilon <= 0.5)) throw DomainError("epsilon must be in (0, 1/2]");
    if (!(delta > 0.0 && delta < 1.0)) throw DomainError("delta must be in (0, 1)");
    if (n == 0) throw DomainError("n must be >= 1");
    if (!(c > 0.0) || !std::isfinite(c)) throw DomainError("c must be positive");
  }
};

// 2 c eps^-2 ln(2n/delta) before rounding up.
inline double required_rank_bound(const JlQuery& q) {
  q.validate();
  return 2.0 * q.c / (q.epsilon * q.epsilon) * std::log(2.0 * static_cast<double>(q.n) / q.delta);
}

inline std::size_t required_rank(const JlQuery& q) {
  return static_cast<std::size_t>(std::ceil(required_rank_bound(q)));
}

struct DistortionReport {
  std::size_t pair_count = 0;
  std::size_t skipped_pairs = 0;  // coincident points; relative distortion undefined
  double max_distortion = 0.0;
  double mean_distortion = 0.0;
  double violation_fraction = 0.0;
};

// Projects each row e_i to z_i = P e_i (no scale or shift) and measures
// |‖z_i - z_j‖ - ‖e_i - e_j‖| / ‖e_i - e_j‖ over all pairs.
inline DistortionReport distortion_report(const Matrix& points, const ProjectionMatrix& proj, double epsilon) {
  if (points.rows() < 2) throw DomainError("distortion_report: need at least 2 points");
  if (points.cols() != proj.p.cols()) throw DimensionError("distortion_report: point dim != projection cols");
  const Matrix z = matmul_nt(points, proj.p);  // row i is (P e_i)^T

  DistortionReport rep;
  std::size_t violations = 0;
  double sum = 0.0;
  std::vector<double> de(points.cols()), dz(z.cols());
  for (std::size_t i = 0; i < points.rows(); ++i) {
    for (std::size_t j = i + 1; j < points.rows(); ++j) {
      for (std::size_t k = 0; k < de.size(); ++k) de[k] = points(i, k) - points(j, k);
      const double ne = norm2(de);
      if (ne == 0.0) {
        ++rep.skipped_pairs;
        continue;
      }
      for (std::size_t k = 0; k < dz.size(); ++k) dz[k] = z(i, k) - z(j, k);
      const double dist = std::abs(norm2(dz) - ne) / ne;
      ++rep.pair_count;
      sum += dist;
      rep.max_distortion = std::max(rep.max_distortion, dist);
      if (dist >= epsilon) ++violations;
    }
  }
  if (rep.pair_count > 0) {
    rep.mean_distortion = sum / static_cast<double>(rep.pair_count);
    rep.violation_fraction = static_cast<double>(violations) / static_cast<double>(rep.pair_count);
  }
  return rep;
}

// Worst case, over pairs, of (bound - |z_i.z_j - e_i.e_j|), where the bound
// follows from polarization and the measured relative distortions of
// ‖e_i‖, ‖e_j‖ and ‖e_i - e_j‖. Non-negative whenever the corollary holds.
inline double dot_product_bound_slack(const Matrix& points, const ProjectionMatrix& proj) {
  if (points.cols() != proj.p.cols()) throw DimensionError("dot_product_bound_slack: dim mismatch");
  const Matrix z = matmul_nt(points, proj.p);
  // |‖z‖^2 - ‖e‖^2| = t (2 + t) ‖e‖^2 with t the relative norm distortion.
  auto sq_error_bound = [](double ne, double nz) {
    if (ne == 0.0) return nz * nz;
    const double t = std::abs(nz - ne) / ne;
    return t * (2.0 + t) * ne * ne;
  };
  double worst = std::numeric_limits<double>::infinity();
  std::vector<double> de(points.cols()), dz(z.cols());
  for (std::size_t i = 0; i < points.rows(); ++i) {
    for (std::size_t j = i + 1; j < points.rows(); ++j) {
      for (std::size_t k = 0; k < de.size(); ++k) de[k] = points(i, k) - points(j, k);
      for (std::size_t k = 0; k < dz.size(); ++k) dz[k] = z(i, k) - z(j, k);
      const double bound = 0.5 * (sq_error_bound(norm2(points.row(i)), norm2(z.row(i))) +
                                   sq_error_bound(norm2(points.row(j)), norm2(z.row(j))) +
                                   sq_error_bound(norm2(de), norm2(dz)));
      const double err = std::abs(dot(z.row(i), z.row(j)) - dot(points.row(i), points.row(j)));
      worst = std::min(worst, bound - err);
    }
  }
  return worst;
}

// Monte Carlo estimate of Pr(|‖Ax‖/sqrt(r) - ‖x‖| >= eps ‖x‖) for a fixed
// unit x = e_1 in R^d. Trial t draws its own A from derive_seed(seed, t).
inline double tail_estimate(std::size_t d, std::size_t r, double epsilon, std::size_t trials, Seed seed) {
  if (trials < 1000) throw DomainError("tail_estimate: trials must be >= 1000");
  if (d == 0 || r == 0) throw DimensionError("tail_estimate: zero dimension");
  if (!(epsilon > 0.0)) throw DomainError("tail_estimate: epsilon must be positive");
  // A fixed unit vector spread over all coordinates, so every column of A is used.
  const std::vector<double> x(d, 1.0 / std::sqrt(static_cast<double>(d)));
  const double var = 1.0 / static_cast<double>(r);
  std::size_t hits = 0;
  for (std::size_t t = 0; t < trials; ++t) {
    const Matrix a = gaussian_matrix(derive_seed(seed, t), r, d, var);
    double sq = 0.0;
    for (std::size_t i = 0; i < r; ++i) {
      const double ax = dot(a.row(i), x);
      sq += ax * ax;
    }
    if (std::abs(std::sqrt(sq) - 1.0) >= epsilon) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(trials);
}

// Least-squares slope of -ln(tail) against r, returning c = eps^2 / slope.
// The intercept absorbs the constant factor in front of the exponential.
inline double fit_c_from_tails(double epsilon, std::span<const std::size_t> ranks, std::span<const double> tails) {
  if (ranks.size() != tails.size()) throw DimensionError("fit_c: ranks and tails differ in length");
  if (ranks.size() < 3) throw DomainError("fit_c: need at least 3 ranks");
  std::vector<double> xs, ys;
  for (std::size_t i = 0; i < ranks.size(); ++i) {
    if (!(tails[i] > 0.0 && tails[i] < 1.0))
      throw DegenerateFitError("fit_c: tail estimate at r=" + std::to_string(ranks[i]) + " is " +
                               std::to_string(tails[i]) + "; increase trials or adjust ranks");
    xs.push_back(static_cast<double>(ranks[i]));
    ys.push_back(-std::log(tails[i]));
  }
  const double nx = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= nx;
  my /= nx;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
  }
  if (sxx == 0.0) throw DegenerateFitError("fit_c: ranks must not all be equal");
  const double slope = sxy / sxx;
  if (!(slope > 0.0)) throw DegenerateFitError("fit_c: tail does not decay with r");
  return epsilon * epsilon / slope;
}

struct CFit {
  double c = 0.0;
  std::vector<std::size_t> ranks;
  std::vector<double> tails;
};

inline CFit fit_c(std::size_t d, double epsilon, std::span<const std::size_t> ranks, std::size_t trials, Seed seed) {
  if (ranks.size() < 3) throw DomainError("fit_c: need at least 3 ranks");
  CFit out;
  out.ranks.assign(ranks.begin(), ranks.end());
  for (std::size_t i = 0; i < ranks.size(); ++i)
    out.tails.push_back(tail_estimate(d, ranks[i], epsilon, trials, derive_seed(seed, 1000 + i)));
  out.c = fit_c_from_tails(epsilon, out.ranks, out.tails);
  return out;
}

}  // namespace ulpt::jl
