#ifndef KFA_KERNELS_HPP
#define KFA_KERNELS_HPP

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "kfa/linalg.hpp"

namespace kfa {

enum class KernelKind { kLinear, kRbf, kPolynomial, kArdRbf };

inline std::string to_string(KernelKind kind) {
  switch (kind) {
    case KernelKind::kLinear: return "linear";
    case KernelKind::kRbf: return "rbf";
    case KernelKind::kPolynomial: return "polynomial";
    case KernelKind::kArdRbf: return "ard_rbf";
  }
  return "unknown";
}

inline KernelKind kernel_kind_from_string(const std::string& s) {
  if (s == "linear") return KernelKind::kLinear;
  if (s == "rbf") return KernelKind::kRbf;
  if (s == "polynomial" || s == "poly") return KernelKind::kPolynomial;
  if (s == "ard_rbf") return KernelKind::kArdRbf;
  throw std::invalid_argument("unknown kernel kind '" + s + "'");
}

struct KernelConfig {
  KernelKind kind = KernelKind::kRbf;
  // RBF width. Non-positive means "not set"; resolve_kernel() fills it in.
  double gamma = 0.0;
  int degree = 2;
  double coef0 = 1.0;
  bool center = true;
  // Per-feature relevances for ard_rbf. Empty means "not set".
  Vector lambda;

  void validate(Index num_features) const {
    switch (kind) {
      case KernelKind::kRbf:
        if (!(gamma > 0.0) || !std::isfinite(gamma)) {
          throw std::invalid_argument("rbf kernel requires gamma > 0");
        }
        break;
      case KernelKind::kPolynomial:
        if (degree < 1) {
          throw std::invalid_argument("polynomial kernel requires degree >= 1");
        }
        break;
      case KernelKind::kArdRbf:
        if (lambda.size() != num_features) {
          throw std::invalid_argument(
              "ard_rbf kernel requires one lambda per feature");
        }
        if (!lambda.allFinite() || (lambda.array() < 0.0).any()) {
          throw std::invalid_argument("ard_rbf lambda must be finite and >= 0");
        }
        break;
      case KernelKind::kLinear:
        break;
    }
  }
};

struct CenteringStats {
  Vector train_row_means;
  double train_grand_mean = 0.0;
};

namespace detail {

inline void check_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) {
    throw std::invalid_argument(std::string(what) + ": non-finite input values");
  }
}

}  // namespace detail

// Median of the pairwise squared Euclidean distances between distinct rows.
// Falls back to 1 when every pair coincides.
inline double median_pairwise_sq_distance(const Matrix& rows) {
  const Index n = rows.rows();
  std::vector<double> d;
  d.reserve(static_cast<size_t>(n * (n - 1) / 2));
  for (Index i = 0; i < n; ++i) {
    for (Index j = i + 1; j < n; ++j) {
      d.push_back((rows.row(i) - rows.row(j)).squaredNorm());
    }
  }
  if (d.empty()) return 1.0;
  auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
  std::nth_element(d.begin(), mid, d.end());
  double med = *mid;
  if (d.size() % 2 == 0) {
    med = 0.5 * (med + *std::max_element(d.begin(), mid));
  }
  return med > 0.0 ? med : 1.0;
}

// Default width 1 / (D * median pairwise squared distance).
inline double default_rbf_gamma(const Matrix& rows) {
  const double d = static_cast<double>(std::max<Index>(rows.cols(), 1));
  return 1.0 / (d * median_pairwise_sq_distance(rows));
}

// Fills in unset widths/relevances from the training rows.
inline KernelConfig resolve_kernel(KernelConfig cfg, const Matrix& train_rows) {
  if ((cfg.kind == KernelKind::kRbf) && !(cfg.gamma > 0.0)) {
    cfg.gamma = default_rbf_gamma(train_rows);
  }
  if (cfg.kind == KernelKind::kArdRbf && cfg.lambda.size() == 0) {
    const double g = cfg.gamma > 0.0 ? cfg.gamma : default_rbf_gamma(train_rows);
    cfg.lambda = Vector::Constant(train_rows.cols(), g);
  }
  return cfg;
}

inline Matrix compute_kernel(const Matrix& rows_a, const Matrix& rows_b,
                             const KernelConfig& config) {
  if (rows_a.cols() != rows_b.cols()) {
    throw std::invalid_argument("compute_kernel: feature dimension mismatch");
  }
  detail::check_finite(rows_a, "compute_kernel");
  detail::check_finite(rows_b, "compute_kernel");
  config.validate(rows_a.cols());

  const Index na = rows_a.rows();
  const Index nb = rows_b.rows();
  Matrix k(na, nb);
  switch (config.kind) {
    case KernelKind::kLinear:
      k.noalias() = rows_a * rows_b.transpose();
      break;
    case KernelKind::kPolynomial: {
      k.noalias() = rows_a * rows_b.transpose();
      k = (k.array() + config.coef0).pow(config.degree).matrix();
      break;
    }
    case KernelKind::kRbf:
    case KernelKind::kArdRbf: {
      const Index d = rows_a.cols();
      Vector w = config.kind == KernelKind::kRbf
                     ? Vector::Constant(d, config.gamma)
                     : config.lambda;
      for (Index j = 0; j < nb; ++j) {
        for (Index i = 0; i < na; ++i) {
          double s = 0.0;
          for (Index f = 0; f < d; ++f) {
            const double diff = rows_a(i, f) - rows_b(j, f);
            s += diff * diff * w(f);
          }
          k(i, j) = std::exp(-s);
        }
      }
      break;
    }
  }
  return k;
}

// Double centering K - 1 m^T - m 1^T + g 1 1^T.
inline std::pair<Matrix, CenteringStats> center_kernel(const Matrix& k_train) {
  if (k_train.rows() != k_train.cols()) {
    throw std::invalid_argument("center_kernel: kernel matrix is not square");
  }
  CenteringStats stats;
  stats.train_row_means = k_train.rowwise().mean();
  stats.train_grand_mean = k_train.mean();
  Matrix c = k_train;
  c.rowwise() -= stats.train_row_means.transpose();
  c.colwise() -= stats.train_row_means;
  c.array() += stats.train_grand_mean;
  return {std::move(c), std::move(stats)};
}

// Centers kernel rows against the training set using training statistics.
inline Matrix center_test_kernel(const Matrix& k_test, const CenteringStats& stats) {
  if (k_test.cols() != stats.train_row_means.size()) {
    throw std::invalid_argument(
        "center_test_kernel: column count does not match training size");
  }
  Matrix c = k_test;
  const Vector own_means = k_test.rowwise().mean();
  c.rowwise() -= stats.train_row_means.transpose();
  c.colwise() -= own_means;
  c.array() += stats.train_grand_mean;
  return c;
}

// Contraction of the ARD-RBF Jacobian against a weight matrix:
//   G_d = sum_{i,j} W_ij * dK(a_i, b_j)/d lambda_d
//       = -sum_{i,j} W_ij * (a_id - b_jd)^2 * K(a_i, b_j).
// The N x N x D tensor is never materialized.
inline Vector ard_rbf_gradient(const Matrix& rows_a, const Matrix& rows_b,
                               const Vector& lambda, const Matrix& weights) {
  if (rows_a.cols() != rows_b.cols() || lambda.size() != rows_a.cols()) {
    throw std::invalid_argument("ard_rbf_gradient: dimension mismatch");
  }
  if (weights.rows() != rows_a.rows() || weights.cols() != rows_b.rows()) {
    throw std::invalid_argument("ard_rbf_gradient: weight shape mismatch");
  }
  if ((lambda.array() < 0.0).any()) {
    throw std::invalid_argument("ard_rbf_gradient: negative lambda");
  }
  const Index d = rows_a.cols();
  Vector grad = Vector::Zero(d);
  Vector sq(d);
  for (Index j = 0; j < rows_b.rows(); ++j) {
    for (Index i = 0; i < rows_a.rows(); ++i) {
      const double w = weights(i, j);
      if (w == 0.0) continue;
      double s = 0.0;
      for (Index f = 0; f < d; ++f) {
        const double diff = rows_a(i, f) - rows_b(j, f);
        sq(f) = diff * diff;
        s += sq(f) * lambda(f);
      }
      const double kw = w * std::exp(-s);
      grad.noalias() -= kw * sq;
    }
  }
  return grad;
}

inline Vector ard_rbf_gradient(const Matrix& rows, const Vector& lambda,
                               const Matrix& weights) {
  return ard_rbf_gradient(rows, rows, lambda, weights);
}

}  // namespace kfa

#endif  // KFA_KERNELS_HPP
