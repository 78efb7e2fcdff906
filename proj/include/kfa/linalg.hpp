#ifndef KFA_LINALG_HPP
#define KFA_LINALG_HPP

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>

namespace kfa {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

// Thrown when a precision matrix cannot be factorized even after jitter.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SpdInverse {
  Matrix inverse;
  double log_det = 0.0;  // log det of the inverse (i.e. of the covariance)
  Eigen::LLT<Matrix> factor;

  // Solves precision * x = rhs with the (possibly jittered) factorization.
  Matrix solve(const Matrix& rhs) const { return factor.solve(rhs); }
};

// Inverts a symmetric positive definite precision matrix through a Cholesky
// factorization. On failure a diagonal jitter of 1e-10, 1e-9, ..., 1e-6
// (scaled by the mean diagonal) is tried before giving up.
inline SpdInverse invert_spd(const Matrix& precision) {
  const Index k = precision.rows();
  if (k != precision.cols()) {
    throw std::invalid_argument("invert_spd: matrix is not square");
  }
  if (k == 0) return {Matrix(0, 0), 0.0, {}};
  if (!precision.allFinite()) {
    throw NumericalError("invert_spd: non-finite precision matrix");
  }
  const Matrix sym = 0.5 * (precision + precision.transpose());
  const double scale = std::max(sym.diagonal().cwiseAbs().mean(), 1e-300);
  double jitter = 0.0;
  for (int attempt = 0; attempt < 6; ++attempt) {
    Eigen::LLT<Matrix> llt;
    if (jitter == 0.0) {
      llt.compute(sym);
    } else {
      llt.compute(sym + Matrix::Identity(k, k) * (jitter * scale));
    }
    if (llt.info() == Eigen::Success) {
      const Matrix l = llt.matrixL();
      const double log_det_precision =
          2.0 * l.diagonal().array().log().sum();
      if (std::isfinite(log_det_precision)) {
        SpdInverse out;
        out.inverse = llt.solve(Matrix::Identity(k, k));
        out.inverse = 0.5 * (out.inverse + out.inverse.transpose()).eval();
        out.log_det = -log_det_precision;
        out.factor = std::move(llt);
        return out;
      }
    }
    jitter = (jitter == 0.0) ? 1e-10 : jitter * 10.0;
  }
  throw NumericalError("invert_spd: precision matrix is not positive definite");
}

inline double log_det_spd(const Matrix& cov) {
  if (cov.rows() == 0) return 0.0;
  Eigen::LLT<Matrix> llt(0.5 * (cov + cov.transpose()));
  if (llt.info() != Eigen::Success) {
    throw NumericalError("log_det_spd: matrix is not positive definite");
  }
  const Matrix l = llt.matrixL();
  return 2.0 * l.diagonal().array().log().sum();
}

// Removes row/column `k` from a square matrix.
inline Matrix drop_index(const Matrix& m, Index k) {
  const Index n = m.rows();
  Matrix out(n - 1, n - 1);
  for (Index i = 0, oi = 0; i < n; ++i) {
    if (i == k) continue;
    for (Index j = 0, oj = 0; j < n; ++j) {
      if (j == k) continue;
      out(oi, oj++) = m(i, j);
    }
    ++oi;
  }
  return out;
}

inline Matrix drop_col(const Matrix& m, Index k) {
  Matrix out(m.rows(), m.cols() - 1);
  out.leftCols(k) = m.leftCols(k);
  out.rightCols(m.cols() - k - 1) = m.rightCols(m.cols() - k - 1);
  return out;
}

inline Matrix drop_row(const Matrix& m, Index k) {
  Matrix out(m.rows() - 1, m.cols());
  out.topRows(k) = m.topRows(k);
  out.bottomRows(m.rows() - k - 1) = m.bottomRows(m.rows() - k - 1);
  return out;
}

inline Vector drop_entry(const Vector& v, Index k) {
  Vector out(v.size() - 1);
  out.head(k) = v.head(k);
  out.tail(v.size() - k - 1) = v.tail(v.size() - k - 1);
  return out;
}

}  // namespace kfa

#endif  // KFA_LINALG_HPP
