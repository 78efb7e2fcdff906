#ifndef KFA_RELEVANCE_HPP
#define KFA_RELEVANCE_HPP

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <stdexcept>
#include <string>
#include <vector>

#include "kfa/kernels.hpp"
#include "kfa/model.hpp"
#include "kfa/updates.hpp"

namespace kfa {

struct LambdaOptConfig {
  double step_size = 1e-3;  // on log(lambda)
  int steps_per_sweep = 10;
  bool adaptive = true;  // Adam-style first/second moment scaling
  double select_threshold = 0.1;

  void validate() const {
    if (!(step_size > 0.0)) throw std::invalid_argument("lambda step_size must be > 0");
    if (steps_per_sweep < 1) throw std::invalid_argument("steps_per_sweep must be >= 1");
    if (select_threshold < 0.0) throw std::invalid_argument("select_threshold must be >= 0");
  }
};

namespace detail {

inline const ViewState& ard_view(const ModelState& s, Index view) {
  const ViewState& v = s.views.at(static_cast<size_t>(view));
  if (!v.spec.kernelized() || v.kernel.kind != KernelKind::kArdRbf) {
    throw std::invalid_argument("view '" + v.spec.name + "' has no ard_rbf kernel");
  }
  if (v.features.cols() == 0) {
    throw std::invalid_argument("view '" + v.spec.name + "' stores no raw features");
  }
  return v;
}

}  // namespace detail

// Data term of the lower bound for one ard_rbf view with the kernel rebuilt
// at `lambda`:
//   -<tau>/2 sum_n sum_u (K_nu^2 - 2 K_nu <a_u><z_n>^T + <a_u^T a_u>:<z_n^T z_n>)
// The last summand does not depend on lambda but is included.
inline double lb_lambda_term(const ModelState& s, Index view, const Vector& lambda) {
  const ViewState& v = detail::ard_view(s, view);
  KernelConfig cfg = v.kernel;
  cfg.lambda = lambda;
  const Matrix t = kernel_target(v, cfg);
  return -0.5 * v.tau.mean(0) *
         expected_residual(t, masked_latent_mean(s, v), latent_cov_sum(s, v), v.dual);
}

// Analytic gradient of lb_lambda_term. With T the (centered) kernel target,
// dLB/dT_nu = -<tau>(T_nu - <z_n><a_u>^T); the chain rule through centering
// is folded into the weights of two ARD-RBF Jacobian contractions.
inline Vector lb_lambda_gradient(const ModelState& s, Index view, const Vector& lambda) {
  const ViewState& v = detail::ard_view(s, view);
  KernelConfig cfg = v.kernel;
  cfg.lambda = lambda;
  const Matrix t = kernel_target(v, cfg);
  const Matrix mz = masked_latent_mean(s, v);
  const double tau = v.tau.mean(0);

  const Index nb = static_cast<Index>(v.basis.size());
  const Index no = v.num_observed();
  // Weights over (observed row, basis column).
  Matrix w = Matrix::Zero(no, nb);
  const Matrix recon = mz * v.dual.mean.transpose();
  for (Index i = 0; i < no; ++i) {
    const Index n = v.observed_rows[i];
    for (Index j = 0; j < static_cast<Index>(v.active.size()); ++j) {
      w(i, v.active[j]) = -tau * (t(n, j) - recon(n, j));
    }
  }
  const Matrix obs_rows = gather_rows(v.features, v.observed_rows);
  const Matrix basis_rows = gather_rows(v.features, v.basis);
  if (!cfg.center) return ard_rbf_gradient(obs_rows, basis_rows, lambda, w);

  const double inv_nb = 1.0 / static_cast<double>(nb);
  const Vector row_sums = w.rowwise().sum();
  const Vector col_sums = w.colwise().sum().transpose();
  const double total = w.sum();
  Matrix w_obs = w;
  w_obs.colwise() -= row_sums * inv_nb;
  Matrix w_basis(nb, nb);
  w_basis.colwise() = -col_sums * inv_nb;
  w_basis.array() += total * inv_nb * inv_nb;
  return ard_rbf_gradient(obs_rows, basis_rows, lambda, w_obs) +
         ard_rbf_gradient(basis_rows, basis_rows, lambda, w_basis);
}

// Ascent on lb_lambda_term over the view's relevances with posteriors held
// fixed. Steps are taken on log(lambda), so each update rescales lambda by a
// positive factor and relevances stay non-negative; a zero relevance stays
// zero. Each step is halved (at most 20 times) until the term does not
// decrease. The view's kernel target is rebuilt afterwards.
inline Vector lambda_step(ModelState& s, Index view, const LambdaOptConfig& cfg) {
  cfg.validate();
  detail::ard_view(s, view);
  ViewState& v = s.views[static_cast<size_t>(view)];
  Vector lambda = v.kernel.lambda;
  const Index d = lambda.size();
  AdamState& adam = v.lambda_adam;
  if (adam.m.size() != d) {
    adam.m = Vector::Zero(d);
    adam.v = Vector::Zero(d);
    adam.t = 0;
  }
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;

  double current = lb_lambda_term(s, view, lambda);
  bool changed = false;
  for (int step = 0; step < cfg.steps_per_sweep; ++step) {
    // Gradient with respect to log(lambda).
    const Vector grad = lb_lambda_gradient(s, view, lambda).cwiseProduct(lambda);
    if (!grad.allFinite()) throw NumericalError("lambda_step: non-finite gradient");
    if (grad.cwiseAbs().maxCoeff() == 0.0) break;
    Vector direction;
    if (cfg.adaptive) {
      ++adam.t;
      adam.m = kBeta1 * adam.m + (1.0 - kBeta1) * grad;
      adam.v = kBeta2 * adam.v + (1.0 - kBeta2) * grad.cwiseAbs2();
      const Vector m_hat = adam.m / (1.0 - std::pow(kBeta1, adam.t));
      const Vector v_hat = adam.v / (1.0 - std::pow(kBeta2, adam.t));
      direction = m_hat.array() / (v_hat.array().sqrt() + kEps);
    } else {
      direction = grad;
    }
    double scale = cfg.step_size;
    bool accepted = false;
    for (int halving = 0; halving <= 20; ++halving) {
      const Vector trial = (lambda.array() * (scale * direction.array()).exp()).matrix();
      const double value = lb_lambda_term(s, view, trial);
      if (std::isfinite(value) && value >= current) {
        accepted = (trial != lambda);
        lambda = trial;
        current = value;
        break;
      }
      scale *= 0.5;
    }
    if (!accepted) break;
    changed = true;
  }
  if (changed) {
    v.kernel.lambda = lambda;
    v.spec.kernel = v.kernel;
    refresh_kernel_target(v);
  }
  return lambda;
}

// Features whose relevance reaches `threshold` times the largest one. At
// least one feature is always kept.
inline std::vector<bool> select_features(const Vector& lambda, double threshold) {
  if (lambda.size() == 0) throw std::invalid_argument("select_features: empty lambda");
  if (threshold < 0.0 || threshold > 1.0) {
    throw std::invalid_argument("select_features: threshold must lie in [0, 1]");
  }
  Index best;
  const double max_lambda = lambda.maxCoeff(&best);
  std::vector<bool> mask(static_cast<size_t>(lambda.size()));
  for (Index d = 0; d < lambda.size(); ++d) mask[d] = lambda(d) >= threshold * max_lambda;
  mask[best] = true;
  return mask;
}

inline void write_relevance_csv(const std::string& path, const Vector& lambda) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << "feature_index,lambda\n" << std::setprecision(17);
  for (Index d = 0; d < lambda.size(); ++d) out << d << ',' << lambda(d) << '\n';
  if (!out) throw std::runtime_error("failed writing '" + path + "'");
}

// Relevance mask rendered as a binary PGM (P5), row-major over an image of
// `height` x `width` pixels, lambda scaled to [0, 255] by its maximum.
inline std::string relevance_pgm(const Vector& lambda, Index height, Index width) {
  if (height <= 0 || width <= 0 || height * width != lambda.size()) {
    throw std::invalid_argument("relevance_pgm: image shape does not match lambda length");
  }
  const double max_lambda = lambda.maxCoeff();
  std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  for (Index d = 0; d < lambda.size(); ++d) {
    const double x = max_lambda > 0.0 ? lambda(d) / max_lambda : 0.0;
    const long level = std::lround(std::clamp(x, 0.0, 1.0) * 255.0);
    out.push_back(static_cast<char>(static_cast<unsigned char>(level)));
  }
  return out;
}

inline void write_relevance_pgm(const std::string& path, const Vector& lambda, Index height,
                                Index width) {
  const std::string bytes = relevance_pgm(lambda, height, width);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace kfa

#endif  // KFA_RELEVANCE_HPP
