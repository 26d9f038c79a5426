#pragma once

// Reference implementations used only by tests. None of these call into the
// library code they check.

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

namespace oracle {

// Row-major triple loop, naive summation order.
inline std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t m,
                                  std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t t = 0; t < k; ++t) acc += a[i * k + t] * b[t * n + j];
      c[i * n + j] = acc;
    }
  return c;
}

// Up-projection forward written out entry by entry.
inline std::vector<double> up_project(const std::vector<double>& z, const std::vector<double>& p,
                                      const std::vector<double>& s, const std::vector<double>& b, std::size_t n,
                                      std::size_t r, std::size_t d) {
  std::vector<double> e(n * d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < r; ++k) acc += z[i * r + k] * p[k * d + j];
      e[i * d + j] = acc * s[j] + b[j];
    }
  return e;
}

// Central differences of f at x, one coordinate at a time.
inline std::vector<double> fd_gradient(const std::function<double(const std::vector<double>&)>& f,
                                       std::vector<double> x, double h) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = x[i];
    x[i] = x0 + h;
    const double fp = f(x);
    x[i] = x0 - h;
    const double fm = f(x);
    x[i] = x0;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// Pr(| |g| - 1 | >= eps) for g ~ N(0, 1) and eps < 1:
// Pr(|g| <= 1 - eps) + Pr(|g| >= 1 + eps).
inline double abs_normal_tail(double eps) {
  const double inner = 2.0 * normal_cdf(1.0 - eps) - 1.0;
  const double outer = 2.0 * (1.0 - normal_cdf(1.0 + eps));
  return inner + outer;
}

// Bitwise CRC-32 (reflected, polynomial 0xEDB88320), no table.
inline std::uint32_t crc32(const std::vector<std::uint8_t>& bytes, std::size_t len) {
  std::uint32_t c = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < len; ++i) {
    c ^= bytes[i];
    for (int k = 0; k < 8; ++k) c = (c >> 1) ^ (0xEDB88320u & (0u - (c & 1u)));
  }
  return ~c;
}

}  // namespace oracle
