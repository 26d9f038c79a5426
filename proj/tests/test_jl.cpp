#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "oracles.hpp"
#include "ulpt/analysis.hpp"
#include "ulpt/jl_lab.hpp"

using namespace ulpt;
using namespace ulpt::jl;

namespace {

double median_violation(std::size_t r, std::size_t seeds) {
  std::vector<double> fr;
  for (std::size_t i = 0; i < seeds; ++i) {
    const Matrix pts = gaussian_matrix(Seed{500}, 64, 256, 1.0);
    const auto proj = sample_full_rank_projection(derive_seed(Seed{600}, i), r, 256);
    fr.push_back(distortion_report(pts, proj, 0.5).violation_fraction);
  }
  return analysis::percentile(fr, 50.0);
}

}  // namespace

TEST(RequiredRank, DirectEvaluation) {
  EXPECT_NEAR(required_rank_bound({0.5, 0.05, 100, 1.0}), 8.0 * std::log(4000.0), 1e-12);
  EXPECT_EQ(required_rank({0.5, 0.05, 100, 1.0}), 67u);
}

TEST(RequiredRank, LinearInC) {
  EXPECT_NEAR(required_rank_bound({0.5, 0.05, 100, 2.0}), 2.0 * required_rank_bound({0.5, 0.05, 100, 1.0}), 1e-12);
  EXPECT_EQ(required_rank({0.5, 0.05, 100, 2.0}), 133u);
}

TEST(RequiredRank, HalvingEpsilonQuadruples) {
  EXPECT_NEAR(required_rank_bound({0.25, 0.05, 100, 1.0}), 4.0 * required_rank_bound({0.5, 0.05, 100, 1.0}), 1e-9);
}

TEST(RequiredRank, MonotoneInDeltaAndN) {
  std::size_t prev = required_rank({0.3, 0.01, 50, 1.0});
  for (double delta : {0.02, 0.05, 0.1, 0.3, 0.9}) {
    const std::size_t r = required_rank({0.3, delta, 50, 1.0});
    EXPECT_LE(r, prev);
    prev = r;
  }
  prev = 0;
  for (std::size_t n : {1u, 2u, 10u, 100u, 10000u}) {
    const std::size_t r = required_rank({0.3, 0.05, n, 1.0});
    EXPECT_GE(r, prev);
    prev = r;
  }
}

TEST(RequiredRank, RejectsOutOfRange) {
  EXPECT_THROW(required_rank({0.6, 0.05, 10, 1.0}), DomainError);
  EXPECT_THROW(required_rank({0.0, 0.05, 10, 1.0}), DomainError);
  EXPECT_THROW(required_rank({0.5, 1.0, 10, 1.0}), DomainError);
  EXPECT_THROW(required_rank({0.5, 0.0, 10, 1.0}), DomainError);
}

TEST(Distortion, IdentityIsIsometry) {
  const Matrix pts = gaussian_matrix(Seed{1}, 10, 6, 1.0);
  const auto rep = distortion_report(pts, ProjectionMatrix::from_matrix(Matrix::identity(6), true), 0.5);
  EXPECT_EQ(rep.pair_count, 45u);
  EXPECT_EQ(rep.max_distortion, 0.0);
  EXPECT_EQ(rep.violation_fraction, 0.0);
}

TEST(Distortion, ScaledPairMatchesSingleVector) {
  const Matrix e1 = gaussian_matrix(Seed{2}, 1, 12, 1.0);
  Matrix pts(2, 12);
  for (std::size_t j = 0; j < 12; ++j) {
    pts(0, j) = e1(0, j);
    pts(1, j) = 2.0 * e1(0, j);
  }
  const auto proj = sample_full_rank_projection(Seed{3}, 4, 12);
  const auto rep = distortion_report(pts, proj, 0.5);
  const Matrix z = matmul_nt(e1, proj.p);
  const double single = std::abs(norm2(z.row(0)) - norm2(e1.row(0))) / norm2(e1.row(0));
  EXPECT_NEAR(rep.max_distortion, single, 1e-12);
}

TEST(Distortion, CoincidentPointsAreSkipped) {
  Matrix pts = gaussian_matrix(Seed{4}, 3, 5, 1.0);
  for (std::size_t j = 0; j < 5; ++j) pts(2, j) = pts(0, j);
  const auto rep = distortion_report(pts, sample_full_rank_projection(Seed{5}, 3, 5), 0.5);
  EXPECT_EQ(rep.skipped_pairs, 1u);
  EXPECT_EQ(rep.pair_count, 2u);
}

TEST(Distortion, ReportInvariants) {
  const auto rep = distortion_report(gaussian_matrix(Seed{6}, 20, 30, 1.0), sample_full_rank_projection(Seed{7}, 5, 30), 0.2);
  EXPECT_GE(rep.violation_fraction, 0.0);
  EXPECT_LE(rep.violation_fraction, 1.0);
  EXPECT_GE(rep.max_distortion, rep.mean_distortion);
  EXPECT_GE(rep.mean_distortion, 0.0);
}

TEST(Distortion, NeedsTwoPoints) {
  EXPECT_THROW(distortion_report(Matrix(1, 4), sample_full_rank_projection(Seed{1}, 2, 4), 0.5), DomainError);
}

TEST(Distortion, GaussianPointsWithinBudget) {
  const Matrix pts = gaussian_matrix(Seed{0}, 64, 256, 1.0);
  const auto rep = distortion_report(pts, sample_full_rank_projection(Seed{1}, 128, 256), 0.5);
  EXPECT_LT(rep.violation_fraction, 0.05);
  const auto wider = distortion_report(pts, sample_full_rank_projection(Seed{1}, 32, 256), 0.2);
  const auto narrower = distortion_report(pts, sample_full_rank_projection(Seed{1}, 128, 256), 0.2);
  EXPECT_LE(narrower.violation_fraction, wider.violation_fraction);
}

TEST(Distortion, MedianViolationNonIncreasingInRank) {
  const double v16 = median_violation(16, 20);
  const double v32 = median_violation(32, 20);
  const double v64 = median_violation(64, 20);
  EXPECT_GE(v16, v32);
  EXPECT_GE(v32, v64);
  EXPECT_GT(v16, 0.0);
}

TEST(Distortion, DotProductsWithinPolarizationBound) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Matrix pts = gaussian_matrix(Seed{10 + s}, 6, 20, 1.0);
    EXPECT_GE(dot_product_bound_slack(pts, sample_full_rank_projection(Seed{40 + s}, 5, 20)), -1e-9);
  }
}

TEST(Tail, LargeEpsilonNeverExceeded) {
  EXPECT_EQ(tail_estimate(8, 3, 10.0, 2000, Seed{1}), 0.0);
}

TEST(Tail, RankOneMatchesNormalOracle) {
  const double expected = oracle::abs_normal_tail(0.5);
  EXPECT_NEAR(expected, 0.5165, 5e-4);
  EXPECT_NEAR(tail_estimate(4, 1, 0.5, 100000, Seed{2}), expected, 0.01);
}

TEST(Tail, DecreasesWithRank) {
  const double t4 = tail_estimate(16, 4, 0.5, 20000, Seed{3});
  const double t16 = tail_estimate(16, 16, 0.5, 20000, Seed{4});
  const double t64 = tail_estimate(16, 64, 0.5, 20000, Seed{5});
  EXPECT_GT(t4, t16);
  EXPECT_GT(t16, t64);
}

TEST(Tail, RequiresEnoughTrials) { EXPECT_THROW(tail_estimate(4, 1, 0.5, 999, Seed{1}), DomainError); }

TEST(FitC, RecoversSyntheticConstant) {
  const std::vector<std::size_t> ranks{4, 8, 16, 32};
  std::vector<double> tails;
  for (std::size_t r : ranks) tails.push_back(std::exp(-0.25 * static_cast<double>(r) / 3.0));
  EXPECT_NEAR(fit_c_from_tails(0.5, ranks, tails), 3.0, 1e-6);
}

TEST(FitC, DegenerateTailsThrow) {
  const std::vector<std::size_t> ranks{4, 8, 16};
  EXPECT_THROW(fit_c_from_tails(0.5, ranks, std::vector<double>{0.3, 0.1, 0.0}), DegenerateFitError);
  EXPECT_THROW(fit_c_from_tails(0.5, ranks, std::vector<double>{1.0, 0.1, 0.01}), DegenerateFitError);
}

TEST(FitC, RealTailsStable) {
  const std::vector<std::size_t> ranks{2, 4, 8, 12};
  const auto a = fit_c(8, 0.5, ranks, 20000, Seed{7});
  const auto b = fit_c(8, 0.5, ranks, 40000, Seed{7});
  EXPECT_TRUE(std::isfinite(a.c));
  EXPECT_GT(a.c, 0.0);
  EXPECT_LT(std::abs(b.c - a.c) / a.c, 0.10);
}
