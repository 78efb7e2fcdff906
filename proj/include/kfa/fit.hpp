#ifndef KFA_FIT_HPP
#define KFA_FIT_HPP

#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "kfa/model.hpp"
#include "kfa/relevance.hpp"
#include "kfa/updates.hpp"

namespace kfa {

struct SweepInfo {
  int restart = 0;
  int iteration = 0;
  double elbo = 0.0;
  Index active_factors = 0;
  std::vector<Index> active_rvs;  // per view, width of the view
};

struct FitConfig {
  int max_iters = 10000;
  int window = 100;
  double rel_tol = 1e-4;
  int restarts = 10;
  int prune_every = 10;  // 0 disables pruning
  // Optional RV cap per double-ARD view as a fraction of its basis (0 = none).
  double rv_budget = 0.0;
  int threads = 1;
  std::optional<LambdaOptConfig> lambda_opt;
  std::function<void(const SweepInfo&)> on_sweep;

  void validate() const {
    if (window < 1) throw std::invalid_argument("window must be >= 1");
    if (max_iters < window + 2) throw std::invalid_argument("max_iters must be >= window + 2");
    if (restarts < 1) throw std::invalid_argument("restarts must be >= 1");
    if (prune_every < 0) throw std::invalid_argument("prune_every must be >= 0");
    if (!(rel_tol > 0.0)) throw std::invalid_argument("rel_tol must be > 0");
    if (rv_budget < 0.0 || rv_budget > 1.0) {
      throw std::invalid_argument("rv_budget must lie in [0, 1]");
    }
    if (lambda_opt) lambda_opt->validate();
  }
};

class FitError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// One coordinate-ascent sweep: for each view dual -> alpha -> gamma -> tau,
// then Z, then the relevance step of every view that learns lambda.
inline void sweep(ModelState& s, const std::optional<LambdaOptConfig>& lambda_opt = {}) {
  for (auto& v : s.views) {
    v.dual = update_dual(s, v);
    v.alpha = update_alpha(s, v);
    if (v.spec.double_ard) v.gamma = update_gamma(s, v);
    v.tau = update_tau(s, v);
  }
  s.z = update_z(s);
  if (lambda_opt) {
    for (size_t m = 0; m < s.views.size(); ++m) {
      if (s.views[m].spec.learn_lambda) lambda_step(s, static_cast<Index>(m), *lambda_opt);
    }
  }
}

// Windowed stopping rule: the newest bound is within rel_tol (relative to
// its magnitude) of the mean of the `window` values before it. Only values
// recorded since the last pruning event are considered.
inline bool converged(const std::vector<double>& history, Index segment_start, int window,
                      double rel_tol) {
  const Index n = static_cast<Index>(history.size());
  if (n - segment_start < window + 1) return false;
  double mean = 0.0;
  for (Index i = n - 1 - window; i < n - 1; ++i) mean += history[static_cast<size_t>(i)];
  mean /= static_cast<double>(window);
  const double last = history.back();
  return mean > last - rel_tol * std::abs(last);
}

// Largest relative drop of the bound between consecutive sweeps, ignoring
// steps across pruning events.
inline double max_relative_decrease(const ModelState& s) {
  double worst = 0.0;
  const auto& h = s.elbo_history;
  for (size_t i = 1; i < h.size(); ++i) {
    const bool after_event =
        std::find(s.structural_events.begin(), s.structural_events.end(),
                  static_cast<Index>(i)) != s.structural_events.end();
    if (after_event) continue;
    const double drop = (h[i - 1] - h[i]) / std::max(std::abs(h[i - 1]), 1e-300);
    worst = std::max(worst, drop);
  }
  return worst;
}

struct ViewInput {
  ViewSpec spec;
  ViewData data;
};

inline std::vector<std::pair<ViewSpec, ViewData>> as_pairs(const std::vector<ViewInput>& views) {
  std::vector<std::pair<ViewSpec, ViewData>> out;
  out.reserve(views.size());
  for (const auto& v : views) out.emplace_back(v.spec, v.data);
  return out;
}

// Runs sweeps on an initialized state until convergence or max_iters.
inline void run_inference(ModelState& s, const FitConfig& cfg, int restart = 0) {
  Index segment_start = static_cast<Index>(s.elbo_history.size());
  for (int it = 0; it < cfg.max_iters; ++it) {
    sweep(s, cfg.lambda_opt);
    bool pruned = false;
    if (cfg.prune_every > 0 && (it + 1) % cfg.prune_every == 0) {
      pruned = prune_factors(s) > 0;
      for (auto& v : s.views) {
        if (!v.spec.double_ard) continue;
        Index budget = 0;
        if (cfg.rv_budget > 0.0) {
          budget = std::max<Index>(
              1, static_cast<Index>(std::ceil(cfg.rv_budget * static_cast<double>(v.basis.size()))));
        }
        pruned = (prune_rvs(s, v, budget) > 0) || pruned;
      }
    }
    const double elbo = compute_elbo(s);
    if (pruned) {
      s.structural_events.push_back(static_cast<Index>(s.elbo_history.size()));
      segment_start = static_cast<Index>(s.elbo_history.size());
    }
    s.elbo_history.push_back(elbo);
    if (cfg.on_sweep) {
      SweepInfo info{restart, it, elbo, s.num_factors(), {}};
      for (const auto& v : s.views) info.active_rvs.push_back(v.width());
      cfg.on_sweep(info);
    }
    if (converged(s.elbo_history, segment_start, cfg.window, cfg.rel_tol)) break;
  }
}

// Fits `restarts` independently seeded models (seeds seed, seed + 1, ...)
// and keeps the one with the highest final bound.
inline ModelState fit(const std::vector<ViewInput>& views, const Hyperparams& hyper,
                      const FitConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  bool has_input = false;
  for (const auto& v : views) has_input = has_input || v.spec.role == ViewRole::kInput;
  if (!has_input) throw std::invalid_argument("fit: at least one input view is required");
  const auto pairs = as_pairs(views);

  const int restarts = cfg.restarts;
  std::vector<std::optional<ModelState>> results(static_cast<size_t>(restarts));
  std::vector<std::string> errors(static_cast<size_t>(restarts));
  std::vector<std::exception_ptr> fatal(static_cast<size_t>(restarts));
  auto run_one = [&](int r) {
    try {
      ModelState s = init_state(pairs, hyper, seed + static_cast<std::uint64_t>(r));
      run_inference(s, cfg, r);
      results[static_cast<size_t>(r)] = std::move(s);
    } catch (const NumericalError& e) {
      errors[static_cast<size_t>(r)] = e.what();
    } catch (...) {
      fatal[static_cast<size_t>(r)] = std::current_exception();
    }
  };
  const int threads = std::max(1, std::min(cfg.threads, restarts));
  if (threads == 1) {
    for (int r = 0; r < restarts; ++r) run_one(r);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        for (int r = t; r < restarts; r += threads) run_one(r);
      });
    }
    for (auto& th : pool) th.join();
  }
  for (const auto& e : fatal) {
    if (e) std::rethrow_exception(e);
  }

  int best = -1;
  for (int r = 0; r < restarts; ++r) {
    const auto& res = results[static_cast<size_t>(r)];
    if (!res || res->elbo_history.empty()) continue;
    if (best < 0 ||
        res->elbo_history.back() > results[static_cast<size_t>(best)]->elbo_history.back()) {
      best = r;
    }
  }
  if (best < 0) {
    std::ostringstream msg;
    msg << "fit: all " << restarts << " restarts failed";
    for (int r = 0; r < restarts; ++r) {
      if (!errors[static_cast<size_t>(r)].empty()) {
        msg << "; restart " << r << ": " << errors[static_cast<size_t>(r)];
      }
    }
    throw FitError(msg.str());
  }
  return std::move(*results[static_cast<size_t>(best)]);
}

namespace detail {

inline const ViewState& output_view(const ModelState& s, const std::string& target) {
  const ViewState& v = s.view(target);
  if (v.spec.role != ViewRole::kOutput) {
    throw std::invalid_argument("view '" + target + "' is not an output view");
  }
  if (v.spec.kernelized()) {
    throw std::invalid_argument("view '" + target + "' is kernelized; predictions need a primal output");
  }
  return v;
}

}  // namespace detail

// Posterior-mean reconstruction <Z><W>^T of an output view for every row of
// the training state. Rows whose output was masked during fitting are the
// semi-supervised predictions.
inline Matrix predict_transductive(const ModelState& s, const std::string& target) {
  const ViewState& out = detail::output_view(s, target);
  return s.z.mean * out.dual.mean.transpose();
}

// Observation rows of a view for new samples: the raw rows for primal
// views, or centered kernel rows against the active RVs for kernelized ones.
inline Matrix view_rows_for(const ViewState& v, const Matrix& new_rows) {
  if (new_rows.cols() != v.features.cols()) {
    throw std::invalid_argument("view '" + v.spec.name + "': expected " +
                                std::to_string(v.features.cols()) + " features, got " +
                                std::to_string(new_rows.cols()));
  }
  if (!v.spec.kernelized()) return new_rows;
  Matrix k = compute_kernel(new_rows, gather_rows(v.features, v.basis), v.kernel);
  if (v.kernel.center) k = center_test_kernel(k, v.centering);
  Matrix out(k.rows(), static_cast<Index>(v.active.size()));
  for (Index j = 0; j < out.cols(); ++j) out.col(j) = k.col(v.active[j]);
  return out;
}

// Posterior latent means of new samples given only the input views.
inline Matrix project_inputs(const ModelState& s, const std::map<std::string, Matrix>& inputs) {
  const Index k = s.num_factors();
  Matrix precision = Matrix::Identity(k, k);
  Matrix acc;
  Index rows = -1;
  for (const auto& v : s.views) {
    if (v.spec.role != ViewRole::kInput) continue;
    auto it = inputs.find(v.spec.name);
    if (it == inputs.end()) {
      throw std::invalid_argument("missing rows for input view '" + v.spec.name + "'");
    }
    if (rows < 0) {
      rows = it->second.rows();
      acc = Matrix::Zero(rows, k);
    } else if (it->second.rows() != rows) {
      throw std::invalid_argument("input views disagree on the number of new rows");
    }
    const double tau = v.tau.mean(0);
    precision += tau * dual_second_moment(v.dual);
    acc += tau * (view_rows_for(v, it->second) * v.dual.mean);
  }
  for (const auto& [name, m] : inputs) s.view(name);
  if (rows < 0) throw std::invalid_argument("model has no input views");
  return acc * invert_spd(precision).inverse;
}

// Inductive prediction of a primal output view for new input rows.
inline Matrix predict(const ModelState& s, const std::map<std::string, Matrix>& inputs,
                      const std::string& target) {
  const ViewState& out = detail::output_view(s, target);
  return project_inputs(s, inputs) * out.dual.mean.transpose();
}

inline std::vector<Index> argmax_rows(const Matrix& scores) {
  std::vector<Index> labels(static_cast<size_t>(scores.rows()));
  for (Index i = 0; i < scores.rows(); ++i) scores.row(i).maxCoeff(&labels[i]);
  return labels;
}

}  // namespace kfa

#endif  // KFA_FIT_HPP
