#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <vector>

namespace faceflow::detail {

// Thin SVD of a tall m x N matrix (m >= N) by one-sided Jacobi rotations.
// Columns are orthogonalized in place; singular values are the resulting
// column norms. Accurate to working precision for the small, well-scaled
// systems produced by keypoint alignment.
template <std::size_t N>
struct ThinSvd {
  std::vector<std::array<double, N>> u;  // m rows
  std::array<double, N> sigma{};
  std::array<std::array<double, N>, N> v{};  // v[row][col]
};

template <std::size_t N>
ThinSvd<N> jacobi_svd(std::vector<std::array<double, N>> a) {
  const std::size_t m = a.size();
  ThinSvd<N> out;
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t j = 0; j < N; ++j) out.v[i][j] = (i == j) ? 1.0 : 0.0;
  }

  constexpr double eps = 1e-15;
  for (int sweep = 0; sweep < 60; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < N; ++p) {
      for (std::size_t q = p + 1; q < N; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += a[i][p] * a[i][p];
          beta += a[i][q] * a[i][q];
          gamma += a[i][p] * a[i][q];
        }
        if (gamma == 0.0 || std::abs(gamma) <= eps * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double ap = a[i][p], aq = a[i][q];
          a[i][p] = c * ap - s * aq;
          a[i][q] = s * ap + c * aq;
        }
        for (std::size_t i = 0; i < N; ++i) {
          const double vp = out.v[i][p], vq = out.v[i][q];
          out.v[i][p] = c * vp - s * vq;
          out.v[i][q] = s * vp + c * vq;
        }
      }
    }
    if (!rotated) break;
  }

  out.u.assign(m, {});
  for (std::size_t j = 0; j < N; ++j) {
    double norm = 0.0;
    for (std::size_t i = 0; i < m; ++i) norm += a[i][j] * a[i][j];
    norm = std::sqrt(norm);
    out.sigma[j] = norm;
    for (std::size_t i = 0; i < m; ++i) out.u[i][j] = norm > 0.0 ? a[i][j] / norm : 0.0;
  }
  return out;
}

}  // namespace faceflow::detail
