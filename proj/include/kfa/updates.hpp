#ifndef KFA_UPDATES_HPP
#define KFA_UPDATES_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "kfa/linalg.hpp"
#include "kfa/model.hpp"

namespace kfa {

inline Matrix dual_cov_sum(const DualPosterior& q) {
  if (q.cov_shared) return static_cast<double>(q.mean.rows()) * *q.cov_shared;
  const Vector total = q.row_scales.colwise().sum().transpose();
  return q.row_basis * total.asDiagonal() * q.row_basis.transpose();
}

// <W^T W> = mu^T mu + sum of row covariances.
inline Matrix dual_second_moment(const DualPosterior& q) {
  return q.mean.transpose() * q.mean + dual_cov_sum(q);
}

// Diagonal of <w_r w_r^T> for every row r (R x K).
inline Matrix dual_row_sq(const DualPosterior& q) {
  Matrix out = q.mean.cwiseAbs2();
  if (q.cov_shared) {
    out.rowwise() += q.cov_shared->diagonal().transpose();
  } else {
    out += q.row_scales * q.row_basis.cwiseAbs2().transpose();
  }
  return out;
}

// Latent means with rows the view does not observe set to zero.
inline Matrix masked_latent_mean(const ModelState& s, const ViewState& v) {
  if (v.num_observed() == s.num_rows()) return s.z.mean;
  Matrix out = Matrix::Zero(s.z.mean.rows(), s.z.mean.cols());
  for (Index n : v.observed_rows) out.row(n) = s.z.mean.row(n);
  return out;
}

// Sum of q(Z) covariances over the rows a view observes.
inline Matrix latent_cov_sum(const ModelState& s, const ViewState& v) {
  const Index k = s.num_factors();
  Matrix out = Matrix::Zero(k, k);
  for (size_t g = 0; g < s.groups.size(); ++g) {
    if (v.observed[s.groups[g].rows.front()]) {
      out += static_cast<double>(s.groups[g].rows.size()) * s.z.covs[g];
    }
  }
  return out;
}

// sum over observed rows of <z_n z_n^T>.
inline Matrix latent_second_moment(const ModelState& s, const ViewState& v, const Matrix& mz) {
  return mz.transpose() * mz + latent_cov_sum(s, v);
}

inline Matrix latent_second_moment(const ModelState& s, const ViewState& v) {
  return latent_second_moment(s, v, masked_latent_mean(s, v));
}

// Expected squared error E||T - Z W^T||^2 over observed rows, as
//   ||T - <Z><W>^T||^2 + tr(<W>^T<W> C_z) + tr(C_w <Z>^T<Z>) + tr(C_w C_z)
// with C_z, C_w the summed covariances. All four terms are non-negative, so
// nothing cancels when T is (nearly) low rank and <tau> becomes large.
inline double expected_residual(const Matrix& target, const Matrix& mz, const Matrix& z_cov,
                                const DualPosterior& dual) {
  const Matrix cw = dual_cov_sum(dual);
  const Matrix mzz = mz.transpose() * mz;
  const Matrix mww = dual.mean.transpose() * dual.mean;
  return (target - mz * dual.mean.transpose()).squaredNorm() + mww.cwiseProduct(z_cov).sum() +
         cw.cwiseProduct(mzz).sum() + cw.cwiseProduct(z_cov).sum();
}

inline double expected_residual(const ModelState& s, const ViewState& v) {
  return expected_residual(v.target, masked_latent_mean(s, v), latent_cov_sum(s, v), v.dual);
}

// q(Z). Rows are grouped by observation mask; each group gets
//   Sigma^{-1} = I + sum_{m observed} <tau_m> <W_m^T W_m>
//   mu_n = sum_{m observed} <tau_m> t_{m,n} <W_m> Sigma.
inline FactorPosterior update_z(const ModelState& s) {
  const Index n = s.num_rows();
  const Index k = s.num_factors();
  const size_t nv = s.views.size();
  std::vector<Matrix> precision_terms(nv);
  std::vector<Matrix> projections(nv);  // tau * T * <W>, N x K
  for (size_t m = 0; m < nv; ++m) {
    const auto& v = s.views[m];
    const double tau = v.tau.mean(0);
    precision_terms[m] = tau * dual_second_moment(v.dual);
    projections[m] = tau * (v.target * v.dual.mean);
  }
  FactorPosterior out;
  out.row_group = s.z.row_group;
  out.mean = Matrix::Zero(n, k);
  out.covs.resize(s.groups.size());
  for (size_t g = 0; g < s.groups.size(); ++g) {
    Matrix precision = Matrix::Identity(k, k);
    for (size_t m = 0; m < nv; ++m) {
      if (s.groups[g].views[m]) precision += precision_terms[m];
    }
    const SpdInverse inv = invert_spd(precision);
    out.covs[g] = inv.inverse;
    const auto& rows = s.groups[g].rows;
    Matrix rhs = Matrix::Zero(k, static_cast<Index>(rows.size()));
    for (size_t i = 0; i < rows.size(); ++i) {
      for (size_t m = 0; m < nv; ++m) {
        if (s.groups[g].views[m]) {
          rhs.col(static_cast<Index>(i)) += projections[m].row(rows[i]).transpose();
        }
      }
    }
    const Matrix sol = inv.solve(rhs);
    for (size_t i = 0; i < rows.size(); ++i) {
      out.mean.row(rows[i]) = sol.col(static_cast<Index>(i)).transpose();
    }
  }
  return out;
}

// q(A) (kernelized) or q(W) (primal):
//   single ARD: Sigma^{-1} = diag<alpha> + <tau><Z^T Z>
//   double ARD: Sigma_r^{-1} = <gamma_r> diag<alpha> + <tau><Z^T Z>
//   mean rows = <tau> T^T <Z> Sigma (per row in the double-ARD case).
// With D = diag<alpha>^(1/2) and <tau> D^-1 <Z^T Z> D^-1 = U L U^T, every
// double-ARD row covariance is D^-1 U (<gamma_r> I + L)^-1 U^T D^-1.
inline DualPosterior update_dual(const ModelState& s, const ViewState& v) {
  const Matrix mz = masked_latent_mean(s, v);
  const Matrix szz = latent_second_moment(s, v, mz);
  const double tau = v.tau.mean(0);
  const Vector alpha = v.alpha.mean();
  const Matrix data = tau * (v.target.transpose() * mz);  // R x K

  DualPosterior out;
  if (!v.spec.double_ard) {
    Matrix precision = tau * szz;
    precision.diagonal() += alpha;
    const SpdInverse inv = invert_spd(precision);
    out.cov_shared = inv.inverse;
    out.mean = inv.solve(data.transpose()).transpose();
    return out;
  }
  const Index r = v.width();
  const Vector gamma = v.gamma.mean();
  const Vector inv_sqrt_alpha = alpha.cwiseSqrt().cwiseInverse();
  Matrix scaled = tau * (inv_sqrt_alpha.asDiagonal() * szz * inv_sqrt_alpha.asDiagonal());
  scaled = 0.5 * (scaled + scaled.transpose()).eval();
  if (!scaled.allFinite()) throw NumericalError("update_dual: non-finite precision matrix");
  Eigen::SelfAdjointEigenSolver<Matrix> eig(scaled);
  if (eig.info() != Eigen::Success) throw NumericalError("update_dual: eigensolver failed");
  const Vector lam = eig.eigenvalues().cwiseMax(0.0);
  out.row_basis = inv_sqrt_alpha.asDiagonal() * eig.eigenvectors();
  out.row_scales.resize(r, lam.size());
  for (Index row = 0; row < r; ++row) {
    out.row_scales.row(row) = (gamma(row) + lam.array()).inverse().transpose();
  }
  const double base = -alpha.array().log().sum();
  out.row_log_det = (base + out.row_scales.array().log().rowwise().sum()).matrix();
  out.mean = (data * out.row_basis).cwiseProduct(out.row_scales) * out.row_basis.transpose();
  if (!out.mean.allFinite()) throw NumericalError("update_dual: non-finite posterior mean");
  return out;
}

// q(alpha_k): a = R/2 + a0, b = b0 + 1/2 sum_r <gamma_r><w_rk^2>
// (<gamma_r> = 1 without double ARD, giving b0 + 1/2 <W^T W>_kk).
inline GammaPosterior update_alpha(const ModelState& s, const ViewState& v) {
  const Index k = s.num_factors();
  const double r = static_cast<double>(v.width());
  GammaPosterior out;
  out.a = Vector::Constant(k, 0.5 * r + s.hyper.a_alpha);
  if (v.spec.double_ard) {
    const Matrix sq = dual_row_sq(v.dual);
    out.b = (s.hyper.b_alpha + 0.5 * (sq.transpose() * v.gamma.mean()).array()).matrix();
  } else {
    out.b = (s.hyper.b_alpha + 0.5 * dual_second_moment(v.dual).diagonal().array()).matrix();
  }
  return out;
}

// q(tau): a = R N_obs / 2 + a0, b = b0 + residual / 2.
inline GammaPosterior update_tau(const ModelState& s, const ViewState& v) {
  double resid = expected_residual(s, v);
  if (resid < 0.0) {
    const double scale = std::max(1.0, v.target.squaredNorm());
    if (resid < -1e-9 * scale) {
      throw NumericalError("update_tau: negative expected residual for view '" +
                           v.spec.name + "'");
    }
    resid = 0.0;
  }
  GammaPosterior out;
  out.a = Vector::Constant(
      1, 0.5 * static_cast<double>(v.width()) * static_cast<double>(v.num_observed()) +
             s.hyper.a_tau);
  out.b = Vector::Constant(1, v.tau_prior_rate + 0.5 * resid);
  return out;
}

// q(gamma_r): a = K/2 + a0, b = b0 + 1/2 sum_k <alpha_k><A_rk^2>.
inline GammaPosterior update_gamma(const ModelState& s, const ViewState& v) {
  if (!v.spec.double_ard) {
    throw std::invalid_argument("update_gamma: view '" + v.spec.name +
                                "' does not use double ARD");
  }
  const Matrix sq = dual_row_sq(v.dual);
  GammaPosterior out;
  out.a = Vector::Constant(v.width(), 0.5 * static_cast<double>(s.num_factors()) +
                                          s.hyper.a_gamma);
  out.b = (s.hyper.b_gamma + 0.5 * (sq * v.alpha.mean()).array()).matrix();
  return out;
}

namespace detail {

inline double gamma_log_prior(const GammaPosterior& q, double a0, double b0) {
  const Vector elog = q.log_mean();
  const Vector e = q.mean();
  const double n = static_cast<double>(q.a.size());
  return n * (a0 * std::log(b0) - std::lgamma(a0)) + (a0 - 1.0) * elog.sum() - b0 * e.sum();
}

inline double gamma_entropy(const GammaPosterior& q) {
  double h = 0.0;
  for (Index i = 0; i < q.a.size(); ++i) {
    const double a = q.a(i);
    h += a - std::log(q.b(i)) + std::lgamma(a) + (1.0 - a) * boost::math::digamma(a);
  }
  return h;
}

inline double gaussian_entropy(Index dim, double log_det_cov) {
  return 0.5 * (static_cast<double>(dim) * (1.0 + kLog2Pi) + log_det_cov);
}

}  // namespace detail

// Expected log-likelihood of one view: N_obs R/2 (<log tau> - log 2 pi)
// - <tau>/2 * expected residual.
inline double view_log_likelihood(const ModelState& s, const ViewState& v) {
  const double count = static_cast<double>(v.width()) * static_cast<double>(v.num_observed());
  const double elog_tau = v.tau.log_mean()(0);
  return 0.5 * count * (elog_tau - kLog2Pi) - 0.5 * v.tau.mean(0) * expected_residual(s, v);
}

// Full mean-field lower bound.
inline double compute_elbo(const ModelState& s) {
  const Index k = s.num_factors();
  const auto& h = s.hyper;
  double elbo = 0.0;

  // Z: prior and entropy.
  for (size_t g = 0; g < s.groups.size(); ++g) {
    const double count = static_cast<double>(s.groups[g].rows.size());
    const double trace = s.z.covs[g].trace();
    const double log_det = log_det_spd(s.z.covs[g]);
    elbo += count * (-0.5 * static_cast<double>(k) * kLog2Pi - 0.5 * trace +
                     detail::gaussian_entropy(k, log_det));
  }
  elbo -= 0.5 * s.z.mean.squaredNorm();

  for (const auto& v : s.views) {
    elbo += view_log_likelihood(s, v);

    const Index r = v.width();
    const Vector ealpha = v.alpha.mean();
    const Vector elog_alpha = v.alpha.log_mean();
    if (v.spec.double_ard) {
      const Vector egamma = v.gamma.mean();
      const Vector elog_gamma = v.gamma.log_mean();
      const Matrix sq = dual_row_sq(v.dual);
      elbo += -0.5 * static_cast<double>(r * k) * kLog2Pi +
              0.5 * static_cast<double>(r) * elog_alpha.sum() +
              0.5 * static_cast<double>(k) * elog_gamma.sum() -
              0.5 * egamma.dot(sq * ealpha);
      for (Index row = 0; row < r; ++row) {
        elbo += detail::gaussian_entropy(k, v.dual.row_log_det(row));
      }
      elbo += detail::gamma_log_prior(v.gamma, h.a_gamma, h.b_gamma) +
              detail::gamma_entropy(v.gamma);
    } else {
      const Matrix sww = dual_second_moment(v.dual);
      elbo += -0.5 * static_cast<double>(r * k) * kLog2Pi +
              0.5 * static_cast<double>(r) * elog_alpha.sum() -
              0.5 * ealpha.dot(sww.diagonal());
      elbo += static_cast<double>(r) *
              detail::gaussian_entropy(k, log_det_spd(*v.dual.cov_shared));
    }
    elbo += detail::gamma_log_prior(v.alpha, h.a_alpha, h.b_alpha) +
            detail::gamma_entropy(v.alpha);
    elbo += detail::gamma_log_prior(v.tau, h.a_tau, v.tau_prior_rate) + detail::gamma_entropy(v.tau);
  }
  if (!std::isfinite(elbo)) throw NumericalError("compute_elbo: non-finite lower bound");
  return elbo;
}

// Per-view column power <W^T W>_kk normalized to sum to one within the view.
inline Matrix factor_relevance(const ModelState& s) {
  Matrix out(static_cast<Index>(s.views.size()), s.num_factors());
  for (size_t m = 0; m < s.views.size(); ++m) {
    const Vector power = dual_second_moment(s.views[m].dual).diagonal();
    const double total = power.sum();
    if (total > 0.0) {
      out.row(static_cast<Index>(m)) = (power / total).transpose();
    } else {
      out.row(static_cast<Index>(m)).setZero();
    }
  }
  return out;
}

// Removes the latent factors in `ks` from every posterior. Covariances are
// replaced by their marginals over the remaining factors.
inline void remove_factors(ModelState& s, std::vector<Index> ks) {
  if (ks.empty()) return;
  std::sort(ks.rbegin(), ks.rend());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  for (Index k : ks) {
    s.z.mean = drop_col(s.z.mean, k);
    for (auto& c : s.z.covs) c = drop_index(c, k);
    for (auto& v : s.views) {
      v.dual.mean = drop_col(v.dual.mean, k);
      if (v.dual.cov_shared) *v.dual.cov_shared = drop_index(*v.dual.cov_shared, k);
      if (v.dual.per_row()) v.dual.row_basis = drop_row(v.dual.row_basis, k);
      v.alpha.a = drop_entry(v.alpha.a, k);
      v.alpha.b = drop_entry(v.alpha.b, k);
    }
    s.active_factors.erase(s.active_factors.begin() + k);
  }
  for (auto& v : s.views) {
    if (!v.dual.per_row()) continue;
    for (Index r = 0; r < v.width(); ++r) v.dual.row_log_det(r) = log_det_spd(v.dual.row_cov(r));
  }
}

inline void remove_factor(ModelState& s, Index k) { remove_factors(s, {k}); }

// Drops factors whose largest per-view relative power is below the
// tolerance. The strongest factor is always kept. Returns how many went.
inline Index prune_factors(ModelState& s) {
  if (s.num_factors() <= 1) return 0;
  const Matrix rel = factor_relevance(s);
  const Vector best = rel.colwise().maxCoeff().transpose();
  Index keep;
  best.maxCoeff(&keep);
  std::vector<Index> drop;
  for (Index k = 0; k < s.num_factors(); ++k) {
    if (k != keep && best(k) < s.hyper.prune_factor_tol) drop.push_back(k);
  }
  remove_factors(s, drop);
  return static_cast<Index>(drop.size());
}

// Removes RV column `j` (position in the active list) from a kernelized view.
inline void remove_rv(ViewState& v, Index j) {
  v.target = drop_col(v.target, j);
  v.dual.mean = drop_row(v.dual.mean, j);
  if (v.dual.per_row()) {
    v.dual.row_scales = drop_row(v.dual.row_scales, j);
    v.dual.row_log_det = drop_entry(v.dual.row_log_det, j);
  }
  if (v.gamma.a.size() > 0) {
    v.gamma.a = drop_entry(v.gamma.a, j);
    v.gamma.b = drop_entry(v.gamma.b, j);
  }
  v.active.erase(v.active.begin() + j);
}

// Row power <a_r a_r^T> (trace) of each RV.
inline Vector rv_power(const ViewState& v) { return dual_row_sq(v.dual).rowwise().sum(); }

// Drops RVs whose row power relative to the strongest RV is below the
// tolerance. With `budget` > 0 the view is further capped to that many RVs,
// keeping those with the smallest <gamma_r>. Never drops the last RV.
inline Index prune_rvs(const ModelState& s, ViewState& v, Index budget = 0) {
  if (!v.spec.double_ard) return 0;
  Index removed = 0;
  const Vector power = rv_power(v);
  const double max_power = power.maxCoeff();
  for (Index j = v.width() - 1; j >= 0 && v.width() > 1; --j) {
    if (!(power(j) >= s.hyper.prune_rv_tol * max_power)) {
      remove_rv(v, j);
      ++removed;
    }
  }
  if (budget > 0 && v.width() > budget) {
    const Vector eg = v.gamma.mean();
    std::vector<Index> order(static_cast<size_t>(v.width()));
    for (Index j = 0; j < v.width(); ++j) order[j] = j;
    std::stable_sort(order.begin(), order.end(), [&](Index x, Index y) { return eg(x) < eg(y); });
    std::vector<Index> drop(order.begin() + budget, order.end());
    std::sort(drop.rbegin(), drop.rend());
    for (Index j : drop) {
      remove_rv(v, j);
      ++removed;
    }
  }
  return removed;
}

}  // namespace kfa

#endif  // KFA_UPDATES_HPP
