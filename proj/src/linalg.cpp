#include "badedit/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "badedit/error.hpp"

namespace badedit::linalg {
namespace {

constexpr double kSymmetryTol = 1e-9;
constexpr double kJitterScale = 1e-6;
constexpr double kJitterMin = 1e-10;
constexpr double kJitterMax = 1e-2;

void check_symmetric(const Mat& a) {
  const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < a.cols(); ++j) {
      if (std::abs(a(i, j) - a(j, i)) > kSymmetryTol * scale) {
        throw Error(ErrorCode::kNotSymmetric,
                    "entry (" + std::to_string(i) + "," + std::to_string(j) + ") differs from its transpose");
      }
    }
  }
}

double pivot_condition(const Eigen::LLT<Mat>& llt) {
  const Vec diag = llt.matrixLLT().diagonal();
  const double lo = diag.minCoeff();
  const double hi = diag.maxCoeff();
  if (lo <= 0.0) return std::numeric_limits<double>::infinity();
  return (hi / lo) * (hi / lo);
}

}  // namespace

bool all_finite(const Mat& m) { return m.allFinite(); }

SpdSolution solve_spd(const Mat& a, const Mat& b) {
  if (a.rows() != a.cols() || a.rows() == 0) {
    throw Error(ErrorCode::kDimensionMismatch, "solve_spd: A must be square and non-empty");
  }
  if (b.rows() != a.rows()) {
    throw Error(ErrorCode::kDimensionMismatch, "solve_spd: B has " + std::to_string(b.rows()) +
                                                   " rows, expected " + std::to_string(a.rows()));
  }
  check_symmetric(a);

  SpdSolution out;
  Mat work = a;
  Eigen::LLT<Mat> llt(work);
  if (llt.info() != Eigen::Success) {
    const auto n = static_cast<double>(a.rows());
    double jitter = kJitterScale * a.trace() / n;
    jitter = std::clamp(jitter, kJitterMin, kJitterMax);
    work.diagonal().array() += jitter;
    llt.compute(work);
    if (llt.info() != Eigen::Success) {
      throw Error(ErrorCode::kSingularAfterJitter, "matrix is not positive definite after jitter " +
                                                       std::to_string(jitter));
    }
    out.report.jitter_applied = jitter;
  }
  out.x = llt.solve(b);
  // One step of iterative refinement against the (possibly jittered) system.
  const Mat r = b - work * out.x;
  out.x += llt.solve(r);
  out.report.condition_hint = pivot_condition(llt);
  return out;
}

Mat ridge_update(const Mat& residue, const Mat& keys, const Mat& cov) {
  if (cov.rows() != cov.cols() || cov.rows() != keys.rows()) {
    throw Error(ErrorCode::kDimensionMismatch, "ridge_update: C must be m x m with m = K.rows");
  }
  if (residue.cols() != keys.cols()) {
    throw Error(ErrorCode::kDimensionMismatch, "ridge_update: R.cols must equal K.cols");
  }
  if (keys.cols() == 0) return Mat::Zero(residue.rows(), keys.rows());

  Mat system = cov + keys * keys.transpose();
  // cov is symmetric; the Gram sum can pick up last-bit asymmetry from GEMM.
  system = 0.5 * (system + system.transpose()).eval();
  const Mat rhs = keys * residue.transpose();  // m x d
  SpdSolution sol = solve_spd(system, rhs);
  return sol.x.transpose();
}

double ridge_residual(const Mat& delta, const Mat& residue, const Mat& keys, const Mat& cov) {
  const Mat system = cov + keys * keys.transpose();
  const Mat rhs = residue * keys.transpose();
  const double denom = rhs.norm();
  const double num = (delta * system - rhs).norm();
  return denom == 0.0 ? num : num / denom;
}

Mat second_moment(std::span<const Vec> keys) {
  if (keys.empty()) throw Error(ErrorCode::kEmptySample, "second_moment: no key vectors");
  const Eigen::Index m = keys.front().size();
  Mat acc = Mat::Zero(m, m);
  for (const Vec& k : keys) {
    if (k.size() != m) {
      throw Error(ErrorCode::kDimensionMismatch, "second_moment: key length " + std::to_string(k.size()) +
                                                     " != " + std::to_string(m));
    }
    for (Eigen::Index i = 0; i < m; ++i) {
      const double ki = k[i];
      for (Eigen::Index j = i; j < m; ++j) acc(i, j) += ki * k[j];
    }
  }
  for (Eigen::Index i = 0; i < m; ++i) {
    for (Eigen::Index j = i + 1; j < m; ++j) acc(j, i) = acc(i, j);
  }
  return acc;
}

}  // namespace badedit::linalg
