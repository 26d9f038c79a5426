// Rank needed for a random projection to preserve pairwise distances, and how
// often it actually fails on Gaussian points.

#include <cstdio>

#include "ulpt/jl_lab.hpp"

int main() {
  using namespace ulpt;
  const double eps = 0.5;
  std::printf("required rank for n=100, eps=%.2f, delta=0.05: %zu\n", eps, jl::required_rank({eps, 0.05, 100, 1.0}));

  const Matrix points = gaussian_matrix(Seed{1}, 64, 256, 1.0);
  for (std::size_t r : {4, 16, 64, 128}) {
    const auto rep = jl::distortion_report(points, sample_full_rank_projection(Seed{2}, r, 256), eps);
    std::printf("r=%3zu  max distortion %.3f  mean %.3f  violations %.4f  tail %.4f\n", r, rep.max_distortion,
                rep.mean_distortion, rep.violation_fraction, jl::tail_estimate(256, r, eps, 10000, Seed{3}));
  }
  return 0;
}
