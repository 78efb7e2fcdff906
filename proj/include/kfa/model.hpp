#ifndef KFA_MODEL_HPP
#define KFA_MODEL_HPP

#include <boost/math/special_functions/digamma.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "kfa/kernels.hpp"
#include "kfa/linalg.hpp"

namespace kfa {

enum class ViewRole { kInput, kOutput };
enum class Representation { kPrimal, kKernelized };

inline std::string to_string(ViewRole r) {
  return r == ViewRole::kInput ? "input" : "output";
}
inline std::string to_string(Representation r) {
  return r == Representation::kPrimal ? "primal" : "kernelized";
}

struct ViewSpec {
  std::string name;
  ViewRole role = ViewRole::kInput;
  Representation representation = Representation::kPrimal;
  std::optional<KernelConfig> kernel;
  bool double_ard = false;    // relevance-vector selection, kernelized only
  bool learn_lambda = false;  // ard_rbf only

  bool kernelized() const { return representation == Representation::kKernelized; }

  void validate() const {
    if (name.empty()) throw std::invalid_argument("view name must not be empty");
    if (kernelized() != kernel.has_value()) {
      throw std::invalid_argument("view '" + name +
                                  "': kernel must be set iff the view is kernelized");
    }
    if (double_ard && !kernelized()) {
      throw std::invalid_argument("view '" + name + "': double ARD needs a kernelized view");
    }
    if (learn_lambda && (!kernel || kernel->kind != KernelKind::kArdRbf)) {
      throw std::invalid_argument("view '" + name + "': learn_lambda needs an ard_rbf kernel");
    }
  }
};

struct ViewData {
  Matrix X;                    // N_total x D_m
  std::vector<bool> observed;  // empty means fully observed
};

struct Hyperparams {
  double a_alpha = 1e-14, b_alpha = 1e-14;
  double a_tau = 1e-14, b_tau = 1e-14;
  double a_gamma = 1e-14, b_gamma = 1e-14;
  int k_init = 0;  // 0 selects min(N, sum of view widths, 100)
  double prune_factor_tol = 1e-6;
  double prune_rv_tol = 1e-6;
  // Lower bound on the tau prior rate, as a noise variance relative to the
  // mean squared target entry: b_tau >= b0 + 1/2 N_obs R noise_floor
  // mean(T^2). Keeps <tau> finite on exactly low-rank targets. 0 disables.
  double noise_floor = 1e-10;

  void validate() const {
    for (double v : {a_alpha, b_alpha, a_tau, b_tau, a_gamma, b_gamma}) {
      if (!(v > 0.0) || !std::isfinite(v)) {
        throw std::invalid_argument("Gamma hyperpriors must be positive and finite");
      }
    }
    if (k_init < 0) throw std::invalid_argument("k_init must be >= 1");
    if (!(noise_floor >= 0.0)) throw std::invalid_argument("noise_floor must be >= 0");
    if (!(prune_factor_tol > 0.0) || !(prune_rv_tol > 0.0)) {
      throw std::invalid_argument("pruning tolerances must be positive");
    }
  }
};

// Gamma(a, b) factors in shape/rate form, one entry per variable.
struct GammaPosterior {
  Vector a;
  Vector b;

  static GammaPosterior prior(Index n, double a0, double b0) {
    return {Vector::Constant(n, a0), Vector::Constant(n, b0)};
  }
  Vector mean() const { return a.cwiseQuotient(b); }
  Vector log_mean() const {
    Vector out(a.size());
    for (Index i = 0; i < a.size(); ++i) {
      out(i) = boost::math::digamma(a(i)) - std::log(b(i));
    }
    return out;
  }
  double mean(Index i) const { return a(i) / b(i); }
};

// q(Z): row means plus one covariance per observation-mask group.
struct FactorPosterior {
  Matrix mean;               // N_total x K
  std::vector<Matrix> covs;  // one K x K covariance per group
  std::vector<int> row_group;

  const Matrix& cov(Index row) const { return covs[static_cast<size_t>(row_group[row])]; }
};

// q(A) for kernelized views (rows = relevance vectors) or q(W) for primal
// views (rows = features).
// With double ARD the row covariances share a factorization
//   Sigma_r = B diag(S_r) B^T
// with B (K x J) common to all rows and S (R x J) holding per-row scales.
struct DualPosterior {
  Matrix mean;                      // R x K
  std::optional<Matrix> cov_shared; // single ARD
  Matrix row_basis;                 // double ARD: B
  Matrix row_scales;                // double ARD: S
  Vector row_log_det;               // double ARD: log det Sigma_r

  bool per_row() const { return !cov_shared.has_value(); }

  Matrix row_cov(Index r) const {
    if (cov_shared) return *cov_shared;
    return row_basis * row_scales.row(r).asDiagonal() * row_basis.transpose();
  }
};

struct AdamState {
  Vector m, v;
  int t = 0;
};

struct ViewState {
  ViewSpec spec;
  Matrix features;             // raw rows N_total x D_m (primal data or kernel inputs)
  std::vector<bool> observed;  // row-level mask
  std::vector<Index> observed_rows;

  // Kernelized views only.
  KernelConfig kernel;
  std::vector<Index> basis;   // feature rows forming kernel columns
  std::vector<Index> active;  // positions into `basis` still kept as RVs
  CenteringStats centering;

  Matrix target;  // N_total x R reconstruction target, zero on unobserved rows
  DualPosterior dual;
  GammaPosterior alpha;  // K entries
  GammaPosterior tau;    // 1 entry
  GammaPosterior gamma;  // R entries, double ARD only
  double tau_prior_rate = 0.0;  // effective b^tau of this view

  AdamState lambda_adam;

  Index width() const { return target.cols(); }
  Index num_observed() const { return static_cast<Index>(observed_rows.size()); }
};

struct MaskGroup {
  std::vector<bool> views;  // which views observe the rows of this group
  std::vector<Index> rows;
};

struct ModelState {
  Hyperparams hyper;
  std::vector<ViewState> views;
  FactorPosterior z;
  std::vector<MaskGroup> groups;
  std::vector<Index> active_factors;  // original latent indices still alive
  std::vector<double> elbo_history;
  std::vector<Index> structural_events;  // history positions after pruning
  std::uint64_t seed = 0;

  Index num_rows() const { return z.mean.rows(); }
  Index num_factors() const { return z.mean.cols(); }

  const ViewState& view(const std::string& name) const {
    for (const auto& v : views) {
      if (v.spec.name == name) return v;
    }
    throw std::invalid_argument("unknown view '" + name + "'");
  }
  Index view_index(const std::string& name) const {
    for (size_t i = 0; i < views.size(); ++i) {
      if (views[i].spec.name == name) return static_cast<Index>(i);
    }
    throw std::invalid_argument("unknown view '" + name + "'");
  }
};

inline Matrix gather_rows(const Matrix& m, const std::vector<Index>& rows) {
  Matrix out(static_cast<Index>(rows.size()), m.cols());
  for (size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = m.row(rows[i]);
  return out;
}

// Kernel rows of observed samples against the basis, centered with basis
// statistics, restricted to the active RV columns. Unobserved rows are zero.
inline Matrix kernel_target(const ViewState& v, const KernelConfig& cfg,
                            CenteringStats* stats = nullptr) {
  const Matrix basis_rows = gather_rows(v.features, v.basis);
  const Matrix obs_rows = gather_rows(v.features, v.observed_rows);
  Matrix k_obs = compute_kernel(obs_rows, basis_rows, cfg);
  CenteringStats centering;
  if (cfg.center) {
    centering = center_kernel(compute_kernel(basis_rows, basis_rows, cfg)).second;
    k_obs = center_test_kernel(k_obs, centering);
  }
  Matrix target = Matrix::Zero(v.features.rows(), static_cast<Index>(v.active.size()));
  for (Index i = 0; i < v.num_observed(); ++i) {
    for (Index j = 0; j < static_cast<Index>(v.active.size()); ++j) {
      target(v.observed_rows[i], j) = k_obs(i, v.active[j]);
    }
  }
  if (stats) *stats = std::move(centering);
  return target;
}

inline void refresh_kernel_target(ViewState& v) {
  if (!v.spec.kernelized()) return;
  v.target = kernel_target(v, v.kernel, &v.centering);
}

// Groups rows by the set of views that observe them.
inline std::vector<MaskGroup> build_mask_groups(const std::vector<ViewState>& views,
                                                Index num_rows, std::vector<int>& row_group) {
  std::map<std::vector<bool>, int> ids;
  std::vector<MaskGroup> groups;
  row_group.assign(static_cast<size_t>(num_rows), 0);
  for (Index n = 0; n < num_rows; ++n) {
    std::vector<bool> pattern(views.size());
    for (size_t m = 0; m < views.size(); ++m) pattern[m] = views[m].observed[n];
    auto [it, inserted] = ids.emplace(pattern, static_cast<int>(groups.size()));
    if (inserted) groups.push_back({pattern, {}});
    groups[static_cast<size_t>(it->second)].rows.push_back(n);
    row_group[n] = it->second;
  }
  return groups;
}

inline int default_k_init(Index num_rows, const std::vector<ViewState>& views) {
  Index total = 0;
  for (const auto& v : views) total += v.width();
  return static_cast<int>(std::max<Index>(1, std::min({num_rows, total, Index{100}})));
}

// Builds the per-view state (kernel targets, masks) without posteriors.
inline ViewState make_view_state(const ViewSpec& spec, const ViewData& data) {
  spec.validate();
  ViewState v;
  v.spec = spec;
  v.features = data.X;
  const Index n = data.X.rows();
  v.observed = data.observed.empty() ? std::vector<bool>(static_cast<size_t>(n), true)
                                     : data.observed;
  if (static_cast<Index>(v.observed.size()) != n) {
    throw std::invalid_argument("view '" + spec.name + "': mask length does not match rows");
  }
  for (Index i = 0; i < n; ++i) {
    if (v.observed[i]) v.observed_rows.push_back(i);
  }
  if (spec.role == ViewRole::kInput && v.num_observed() != n) {
    throw std::invalid_argument("input view '" + spec.name + "' must be fully observed");
  }
  if (v.observed_rows.empty()) {
    throw std::invalid_argument("view '" + spec.name + "' has no observed rows");
  }
  Matrix obs(v.num_observed(), data.X.cols());
  for (Index i = 0; i < v.num_observed(); ++i) obs.row(i) = data.X.row(v.observed_rows[i]);
  if (!obs.allFinite()) {
    throw std::invalid_argument("view '" + spec.name + "': non-finite values in observed rows");
  }

  if (spec.kernelized()) {
    v.kernel = resolve_kernel(*spec.kernel, obs);
    v.kernel.validate(data.X.cols());
    v.spec.kernel = v.kernel;
    v.basis = v.observed_rows;
    v.active.resize(v.basis.size());
    for (size_t j = 0; j < v.active.size(); ++j) v.active[j] = static_cast<Index>(j);
    refresh_kernel_target(v);
  } else {
    v.target = Matrix::Zero(n, data.X.cols());
    for (Index i : v.observed_rows) v.target.row(i) = data.X.row(i);
  }
  return v;
}

// Random initialization: Z rows ~ N(0, I), dual means ~ N(0, 1/K), all
// covariances identity and every Gamma factor at its prior.
inline ModelState init_state(const std::vector<std::pair<ViewSpec, ViewData>>& views,
                             const Hyperparams& hyper, std::uint64_t seed) {
  hyper.validate();
  if (views.empty()) throw std::invalid_argument("init_state: no views given");
  const Index n = views.front().second.X.rows();
  for (const auto& [spec, data] : views) {
    if (data.X.rows() != n) {
      throw std::invalid_argument("init_state: views disagree on the number of rows");
    }
  }
  {
    std::vector<std::string> names;
    for (const auto& [spec, data] : views) names.push_back(spec.name);
    std::sort(names.begin(), names.end());
    if (std::adjacent_find(names.begin(), names.end()) != names.end()) {
      throw std::invalid_argument("init_state: duplicate view names");
    }
  }

  ModelState state;
  state.hyper = hyper;
  state.seed = seed;
  for (const auto& [spec, data] : views) state.views.push_back(make_view_state(spec, data));

  const int k = hyper.k_init > 0 ? hyper.k_init : default_k_init(n, state.views);
  state.hyper.k_init = k;

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  state.z.mean.resize(n, k);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < k; ++j) state.z.mean(i, j) = normal(rng);
  }
  state.groups = build_mask_groups(state.views, n, state.z.row_group);
  state.z.covs.assign(state.groups.size(), Matrix::Identity(k, k));

  const double scale = 1.0 / std::sqrt(static_cast<double>(k));
  for (auto& v : state.views) {
    const Index r = v.width();
    v.dual.mean.resize(r, k);
    for (Index i = 0; i < r; ++i) {
      for (Index j = 0; j < k; ++j) v.dual.mean(i, j) = scale * normal(rng);
    }
    if (v.spec.double_ard) {
      v.dual.row_basis = Matrix::Identity(k, k);
      v.dual.row_scales = Matrix::Ones(r, k);
      v.dual.row_log_det = Vector::Zero(r);
    } else {
      v.dual.cov_shared = Matrix::Identity(k, k);
    }
    v.alpha = GammaPosterior::prior(k, hyper.a_alpha, hyper.b_alpha);
    v.tau_prior_rate = hyper.b_tau + 0.5 * hyper.noise_floor * v.target.squaredNorm();
    v.tau = GammaPosterior::prior(1, hyper.a_tau, hyper.b_tau);
    if (v.spec.double_ard) v.gamma = GammaPosterior::prior(r, hyper.a_gamma, hyper.b_gamma);
  }
  state.active_factors.resize(static_cast<size_t>(k));
  for (int j = 0; j < k; ++j) state.active_factors[static_cast<size_t>(j)] = j;
  return state;
}

}  // namespace kfa

#endif  // KFA_MODEL_HPP
