#pragma once

// Dense 64-bit kernels behind the closed-form weight edit.

#include <Eigen/Dense>
#include <span>
#include <vector>

namespace badedit::linalg {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

struct SpdSolveReport {
  double jitter_applied = 0.0;
  // Ratio of the largest to the smallest Cholesky pivot, squared.
  double condition_hint = 0.0;
};

struct SpdSolution {
  Mat x;
  SpdSolveReport report;
};

// Solves A X = B for symmetric positive definite A. On a failed Cholesky
// factorization one retry is made with A + (1e-6 trace(A)/n) I.
SpdSolution solve_spd(const Mat& a, const Mat& b);

// R K^T (C + K K^T)^{-1}. R is d x n, K is m x n, C is m x m.
Mat ridge_update(const Mat& residue, const Mat& keys, const Mat& cov);

// Relative Frobenius residual of delta (C + K K^T) - R K^T.
double ridge_residual(const Mat& delta, const Mat& residue, const Mat& keys, const Mat& cov);

// Uncentered sum of k k^T in input order.
Mat second_moment(std::span<const Vec> keys);

bool all_finite(const Mat& m);

}  // namespace badedit::linalg
