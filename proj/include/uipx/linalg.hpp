#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "uipx/errors.hpp"

namespace uipx {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Cholesky factorization of a symmetric positive definite matrix with a
/// conditioning check. `where` is embedded in diagnostics.
class SpdFactor {
 public:
  static constexpr double kMaxCondition = 1e12;
  static constexpr double kMinPivot = 1e-14;

  SpdFactor(const Mat& a, const std::string& where) : llt_(a) {
    if (llt_.info() != Eigen::Success || a.rows() == 0) {
      throw NumericalError("sigma_F^T sigma_F is not positive definite at " + where);
    }
    // Condition estimate from the Cholesky diagonal; exact for 1x1.
    const auto diag = llt_.matrixLLT().diagonal().cwiseAbs();
    const double lo = diag.minCoeff();
    const double hi = diag.maxCoeff();
    condition_ = lo * lo > kMinPivot ? (hi * hi) / (lo * lo) : INFINITY;
    if (!(condition_ < kMaxCondition)) {
      std::ostringstream os;
      os << "sigma_F^T sigma_F is numerically singular at " << where
         << " (condition estimate " << condition_ << ")";
      throw NumericalError(os.str());
    }
  }

  template <typename Rhs>
  auto solve(const Rhs& b) const {
    return llt_.solve(b);
  }

  Mat inverse() const { return llt_.solve(Mat::Identity(llt_.rows(), llt_.cols())); }
  double condition() const { return condition_; }

 private:
  Eigen::LLT<Mat> llt_;
  double condition_ = 1.0;
};

/// Eigen-decomposition of a symmetric matrix with numerical rank/image.
struct SymmetricSpectrum {
  Vec eigenvalues;   // ascending
  Mat eigenvectors;  // columns
  int rank = 0;
  Mat image_basis;   // orthonormal columns spanning Im(A)

  /// Relative threshold on |lambda| / max|lambda| for rank decisions.
  static constexpr double kRankTolerance = 1e-10;
};

inline SymmetricSpectrum symmetric_spectrum(const Mat& a) {
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (a + a.transpose()));
  SymmetricSpectrum out;
  out.eigenvalues = es.eigenvalues();
  out.eigenvectors = es.eigenvectors();
  const double scale = out.eigenvalues.cwiseAbs().maxCoeff();
  std::vector<int> keep;
  for (int i = 0; i < out.eigenvalues.size(); ++i) {
    if (scale > 0.0 && std::abs(out.eigenvalues(i)) > SymmetricSpectrum::kRankTolerance * scale) {
      keep.push_back(i);
    }
  }
  out.rank = static_cast<int>(keep.size());
  out.image_basis.resize(a.rows(), out.rank);
  for (int c = 0; c < out.rank; ++c) out.image_basis.col(c) = out.eigenvectors.col(keep[c]);
  return out;
}

inline std::string describe_point(double t, const Vec& x) {
  std::ostringstream os;
  os << "(t=" << t << ", x=[";
  for (int i = 0; i < x.size(); ++i) os << (i ? ", " : "") << x(i);
  os << "])";
  return os.str();
}

}  // namespace uipx
