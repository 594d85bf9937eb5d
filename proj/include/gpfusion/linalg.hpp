#pragma once

#include <cmath>
#include <optional>

#include <Eigen/Dense>

#include "core.hpp"

namespace gpfusion::linalg {

// In-place lower Cholesky (Cholesky-Banachiewicz). The strict upper triangle is
// zeroed. Returns false when a pivot is not strictly positive.
inline bool cholesky_lower_in_place(Eigen::MatrixXd& a) {
  const Eigen::Index n = a.rows();
  for (Eigen::Index j = 0; j < n; ++j) {
    // Left-looking column update: a(j:, j) -= L(j:, :j) * L(j, :j)^T
    if (j > 0)
      a.col(j).tail(n - j).noalias() -= a.bottomLeftCorner(n - j, j) * a.row(j).head(j).transpose();
    const double d = a(j, j);
    if (!(d > 0.0) || !std::isfinite(d)) return false;
    const double ljj = std::sqrt(d);
    a(j, j) = ljj;
    a.col(j).tail(n - j - 1) /= ljj;
  }
  a.triangularView<Eigen::StrictlyUpper>().setZero();
  return true;
}

struct JitteredCholesky {
  Eigen::MatrixXd lower;
  double jitter = 0.0;  // absolute value added to the diagonal
};

// Factorizes a + jitter*I. Tries jitter = 0 first, then escalates from
// 1e-10*mean(diag) by x10 up to max_relative*mean(diag).
inline std::optional<JitteredCholesky> cholesky_with_jitter(const Eigen::MatrixXd& a,
                                                            double max_relative = 1e-4) {
  const Eigen::Index n = a.rows();
  double scale = n > 0 ? a.diagonal().mean() : 1.0;
  if (!(scale > 0.0) || !std::isfinite(scale)) scale = 1.0;
  JitteredCholesky out;
  out.lower = a;
  if (cholesky_lower_in_place(out.lower)) return out;
  for (double rel = 1e-10; rel <= max_relative * (1.0 + 1e-12); rel *= 10.0) {
    out.jitter = rel * scale;
    out.lower = a;
    out.lower.diagonal().array() += out.jitter;
    if (cholesky_lower_in_place(out.lower)) return out;
  }
  return std::nullopt;
}

// Inverse of a lower-triangular matrix by column-oriented forward
// substitution; much cheaper than a generic triangular solve at GP sizes.
inline Eigen::MatrixXd lower_triangular_inverse(const Eigen::MatrixXd& lower) {
  const Eigen::Index n = lower.rows();
  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    x(j, j) = 1.0;
    for (Eigen::Index k = j; k < n; ++k) {
      const double v = x(k, j) / lower(k, k);
      x(k, j) = v;
      if (k + 1 < n) x.col(j).segment(k + 1, n - k - 1).noalias() -= v * lower.col(k).tail(n - k - 1);
    }
  }
  return x;
}

// Solves (L L^T) x = b.
template <typename Rhs>
Eigen::MatrixXd cholesky_solve(const Eigen::MatrixXd& lower, const Rhs& b) {
  Eigen::MatrixXd x = lower.triangularView<Eigen::Lower>().solve(b);
  lower.transpose().triangularView<Eigen::Upper>().solveInPlace(x);
  return x;
}

inline double log_det_from_cholesky(const Eigen::MatrixXd& lower) {
  return 2.0 * lower.diagonal().array().log().sum();
}

}  // namespace gpfusion::linalg
