#ifndef KFA_RUN_CONFIG_HPP
#define KFA_RUN_CONFIG_HPP

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "kfa/fit.hpp"
#include "kfa/harness.hpp"
#include "kfa/model.hpp"
#include "kfa/relevance.hpp"

namespace kfa {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ViewConfig {
  ViewSpec spec;
  std::string path;
  std::vector<std::string> columns;  // empty: every column of the file
  bool classification = false;       // output view holding class labels
};

struct RunConfig {
  std::vector<ViewConfig> views;
  Hyperparams hyper;
  FitConfig fit;
  std::optional<LambdaOptConfig> lambda_opt;
  std::optional<CVPlan> cv;
  std::vector<double> gamma_grid;   // inner-CV widths
  bool default_gamma_grid = false;  // "gamma_grid": "default"
  std::vector<double> rv_percentages;
  std::optional<std::pair<Index, Index>> image_shape;  // height, width
  std::string output_dir = ".";
  std::uint64_t seed = 0;
  int threads = 1;

  const ViewConfig& output_view() const {
    const ViewConfig* out = nullptr;
    for (const auto& v : views) {
      if (v.spec.role != ViewRole::kOutput) continue;
      if (out) throw ConfigError("config has more than one output view");
      out = &v;
    }
    if (!out) throw ConfigError("config has no output view");
    return *out;
  }
};

namespace detail {

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline void reject_unknown(const nlohmann::json& j, const std::vector<std::string>& known,
                           const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(known.begin(), known.end(), it.key()) == known.end()) {
      throw ConfigError("unknown key '" + it.key() + "' in " + where);
    }
  }
}

inline KernelConfig parse_kernel(const nlohmann::json& j) {
  reject_unknown(j, {"kind", "gamma", "degree", "coef0", "center", "lambda"}, "kernel");
  KernelConfig k;
  if (j.contains("kind")) k.kind = kernel_kind_from_string(j.at("kind").get<std::string>());
  read_opt(j, "gamma", k.gamma);
  read_opt(j, "degree", k.degree);
  read_opt(j, "coef0", k.coef0);
  read_opt(j, "center", k.center);
  if (j.contains("lambda")) {
    const auto values = j.at("lambda").get<std::vector<double>>();
    k.lambda = Eigen::Map<const Vector>(values.data(), static_cast<Index>(values.size()));
  }
  return k;
}

inline ViewConfig parse_view(const nlohmann::json& j, const std::filesystem::path& base) {
  reject_unknown(j, {"name", "role", "representation", "kernel", "double_ard", "learn_lambda",
                     "path", "columns", "classification"},
                 "view");
  ViewConfig v;
  v.spec.name = j.at("name").get<std::string>();
  const std::string role = j.value("role", "input");
  if (role == "input") {
    v.spec.role = ViewRole::kInput;
  } else if (role == "output") {
    v.spec.role = ViewRole::kOutput;
  } else {
    throw ConfigError("view '" + v.spec.name + "': role must be input or output");
  }
  const std::string rep = j.value("representation", j.contains("kernel") ? "kernelized" : "primal");
  if (rep == "primal") {
    v.spec.representation = Representation::kPrimal;
  } else if (rep == "kernelized") {
    v.spec.representation = Representation::kKernelized;
    v.spec.kernel = j.contains("kernel") ? parse_kernel(j.at("kernel")) : KernelConfig{};
  } else {
    throw ConfigError("view '" + v.spec.name + "': representation must be primal or kernelized");
  }
  if (v.spec.representation == Representation::kPrimal && j.contains("kernel")) {
    throw ConfigError("view '" + v.spec.name + "': primal views take no kernel");
  }
  read_opt(j, "double_ard", v.spec.double_ard);
  read_opt(j, "learn_lambda", v.spec.learn_lambda);
  read_opt(j, "columns", v.columns);
  read_opt(j, "classification", v.classification);
  if (v.classification && v.spec.role != ViewRole::kOutput) {
    throw ConfigError("view '" + v.spec.name + "': only output views can hold class labels");
  }
  const std::filesystem::path p = j.at("path").get<std::string>();
  v.path = (p.is_absolute() ? p : base / p).lexically_normal().string();
  if (!std::filesystem::exists(v.path)) {
    throw ConfigError("view '" + v.spec.name + "': data file '" + v.path + "' does not exist");
  }
  try {
    v.spec.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return v;
}

}  // namespace detail

// Parses a run configuration. Relative data paths resolve against `base`.
inline RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base = ".") {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig c;
  try {
    detail::reject_unknown(j, {"views", "hyper", "fit", "lambda_opt", "cv", "gamma_grid",
                               "rv_percentages", "image_shape", "output_dir", "seed", "threads"},
                           "config");
    if (!j.contains("views") || !j.at("views").is_array() || j.at("views").empty()) {
      throw ConfigError("config needs a non-empty 'views' list");
    }
    for (const auto& jv : j.at("views")) c.views.push_back(detail::parse_view(jv, base));

    if (j.contains("hyper")) {
      const auto& h = j.at("hyper");
      detail::reject_unknown(h, {"a_alpha", "b_alpha", "a_tau", "b_tau", "a_gamma", "b_gamma",
                                 "k_init", "prune_factor_tol", "prune_rv_tol", "noise_floor"},
                             "hyper");
      detail::read_opt(h, "a_alpha", c.hyper.a_alpha);
      detail::read_opt(h, "b_alpha", c.hyper.b_alpha);
      detail::read_opt(h, "a_tau", c.hyper.a_tau);
      detail::read_opt(h, "b_tau", c.hyper.b_tau);
      detail::read_opt(h, "a_gamma", c.hyper.a_gamma);
      detail::read_opt(h, "b_gamma", c.hyper.b_gamma);
      detail::read_opt(h, "k_init", c.hyper.k_init);
      detail::read_opt(h, "prune_factor_tol", c.hyper.prune_factor_tol);
      detail::read_opt(h, "prune_rv_tol", c.hyper.prune_rv_tol);
      detail::read_opt(h, "noise_floor", c.hyper.noise_floor);
    }
    if (j.contains("fit")) {
      const auto& f = j.at("fit");
      detail::reject_unknown(f, {"max_iters", "window", "rel_tol", "restarts", "prune_every", "rv_budget"},
                             "fit");
      detail::read_opt(f, "max_iters", c.fit.max_iters);
      detail::read_opt(f, "window", c.fit.window);
      detail::read_opt(f, "rel_tol", c.fit.rel_tol);
      detail::read_opt(f, "restarts", c.fit.restarts);
      detail::read_opt(f, "prune_every", c.fit.prune_every);
      detail::read_opt(f, "rv_budget", c.fit.rv_budget);
    }
    if (j.contains("lambda_opt")) {
      const auto& l = j.at("lambda_opt");
      detail::reject_unknown(l, {"step_size", "steps_per_sweep", "adaptive", "select_threshold"},
                             "lambda_opt");
      LambdaOptConfig lo;
      detail::read_opt(l, "step_size", lo.step_size);
      detail::read_opt(l, "steps_per_sweep", lo.steps_per_sweep);
      detail::read_opt(l, "adaptive", lo.adaptive);
      detail::read_opt(l, "select_threshold", lo.select_threshold);
      c.lambda_opt = lo;
    }
    if (j.contains("cv")) {
      const auto& v = j.at("cv");
      detail::reject_unknown(v, {"outer_folds", "inner_folds", "seed", "standardize"}, "cv");
      CVPlan plan;
      detail::read_opt(v, "outer_folds", plan.outer_folds);
      detail::read_opt(v, "inner_folds", plan.inner_folds);
      detail::read_opt(v, "seed", plan.seed);
      detail::read_opt(v, "standardize", plan.standardize);
      c.cv = plan;
    }
    if (j.contains("gamma_grid")) {
      const auto& g = j.at("gamma_grid");
      if (g.is_string()) {
        if (g.get<std::string>() != "default") throw ConfigError("gamma_grid must be a list or \"default\"");
        c.default_gamma_grid = true;
      } else {
        c.gamma_grid = g.get<std::vector<double>>();
      }
    }
    detail::read_opt(j, "rv_percentages", c.rv_percentages);
    if (j.contains("image_shape")) {
      const auto shape = j.at("image_shape").get<std::vector<Index>>();
      if (shape.size() != 2) throw ConfigError("image_shape must be [height, width]");
      c.image_shape = std::make_pair(shape[0], shape[1]);
    }
    detail::read_opt(j, "output_dir", c.output_dir);
    detail::read_opt(j, "seed", c.seed);
    detail::read_opt(j, "threads", c.threads);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }

  std::vector<std::string> names;
  bool has_input = false;
  for (const auto& v : c.views) {
    if (std::find(names.begin(), names.end(), v.spec.name) != names.end()) {
      throw ConfigError("duplicate view name '" + v.spec.name + "'");
    }
    names.push_back(v.spec.name);
    has_input = has_input || v.spec.role == ViewRole::kInput;
  }
  if (!has_input) throw ConfigError("config needs at least one input view");
  if (c.threads < 0) throw ConfigError("threads must be >= 0");
  try {
    c.hyper.validate();
    c.fit.validate();
    if (c.lambda_opt) c.lambda_opt->validate();
    if (c.cv) c.cv->validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  for (double g : c.gamma_grid) {
    if (!(g > 0.0)) throw ConfigError("gamma_grid values must be positive");
  }
  for (double p : c.rv_percentages) {
    if (!(p > 0.0 && p <= 100.0)) throw ConfigError("rv_percentages must lie in (0, 100]");
  }
  if (c.cv) c.output_view();
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::ios_base::failure("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return parse_run_config(j, std::filesystem::path(path).parent_path());
}

// Thread count: explicit value, else KFA_THREADS, else 1; 0 means one per
// hardware thread.
inline int resolve_threads(std::optional<int> flag, int config_value = 1) {
  int n = config_value;
  if (flag) {
    n = *flag;
  } else if (const char* env = std::getenv("KFA_THREADS")) {
    try {
      n = std::stoi(env);
    } catch (const std::exception&) {
      throw ConfigError("KFA_THREADS must be an integer");
    }
  }
  if (n < 0) throw ConfigError("thread count must be >= 0");
  if (n == 0) n = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  return n;
}

// Rows of one view's file, restricted to the configured columns.
inline Matrix load_view_matrix(const ViewConfig& v, std::vector<std::string>* names = nullptr) {
  const CsvTable t = read_csv_table(v.path);
  std::vector<Index> cols;
  if (v.columns.empty()) {
    for (Index c = 0; c < static_cast<Index>(t.header.size()); ++c) cols.push_back(c);
  } else {
    for (const auto& name : v.columns) cols.push_back(t.column(name));
  }
  if (names) {
    names->clear();
    for (Index c : cols) names->push_back(t.header[c]);
  }
  return select_columns(t.values, cols);
}

struct LoadedViews {
  std::vector<ViewInput> inputs;
  std::vector<std::vector<std::string>> column_names;
  std::vector<std::vector<double>> class_values;  // per view, classification only
  Index rows_rejected = 0;
};

// Reads every view for fitting. An output row whose cells are all missing is
// treated as unobserved; other rows with missing cells are dropped.
inline LoadedViews load_views(const RunConfig& c) {
  LoadedViews out;
  std::vector<Matrix> mats;
  for (const auto& v : c.views) {
    std::vector<std::string> names;
    mats.push_back(load_view_matrix(v, &names));
    out.column_names.push_back(names);
    if (mats.back().cols() == 0) throw DataError("view '" + v.spec.name + "' has no columns");
    if (mats.back().rows() != mats.front().rows()) {
      throw DataError("view '" + v.spec.name + "' has a different number of rows");
    }
    if (v.classification && mats.back().cols() != 1) {
      throw DataError("classification view '" + v.spec.name + "' needs exactly one label column");
    }
  }
  const Index n = mats.front().rows();
  std::vector<Index> keep;
  for (Index i = 0; i < n; ++i) {
    bool ok = true;
    for (size_t m = 0; m < mats.size() && ok; ++m) {
      const auto row = mats[m].row(i);
      const bool all_missing = row.array().isNaN().all();
      if (c.views[m].spec.role == ViewRole::kOutput && all_missing) continue;
      ok = row.allFinite();
    }
    if (ok) keep.push_back(i);
  }
  out.rows_rejected = n - static_cast<Index>(keep.size());
  if (static_cast<Index>(keep.size()) < 10) throw DataError("fewer than 10 usable rows");
  out.class_values.resize(c.views.size());
  for (size_t m = 0; m < mats.size(); ++m) {
    Matrix x = gather_rows(mats[m], keep);
    std::vector<bool> observed(keep.size(), true);
    for (Index i = 0; i < x.rows(); ++i) {
      if (!x.row(i).allFinite()) {
        observed[static_cast<size_t>(i)] = false;
        x.row(i).setZero();
      }
    }
    if (c.views[m].classification) {
      std::vector<double> values;
      for (Index i = 0; i < x.rows(); ++i) {
        if (observed[static_cast<size_t>(i)]) values.push_back(x(i, 0));
      }
      std::sort(values.begin(), values.end());
      values.erase(std::unique(values.begin(), values.end()), values.end());
      if (values.size() < 2) throw DataError("view '" + c.views[m].spec.name + "' needs two classes");
      Matrix hot = Matrix::Zero(x.rows(), static_cast<Index>(values.size()));
      for (Index i = 0; i < x.rows(); ++i) {
        if (!observed[static_cast<size_t>(i)]) continue;
        hot(i, std::lower_bound(values.begin(), values.end(), x(i, 0)) - values.begin()) = 1.0;
      }
      x = hot;
      out.class_values[m] = values;
    }
    const bool all = std::all_of(observed.begin(), observed.end(), [](bool b) { return b; });
    out.inputs.push_back({c.views[m].spec, {x, all ? std::vector<bool>{} : observed}});
  }
  return out;
}

// Dataset for cross-validation: the single input view as features and the
// output view as targets.
inline Dataset load_cv_dataset(const RunConfig& c, IngestReport* report = nullptr) {
  const ViewConfig& out = c.output_view();
  const ViewConfig* in = nullptr;
  for (const auto& v : c.views) {
    if (v.spec.role != ViewRole::kInput) continue;
    if (in) throw ConfigError("cross-validation supports a single input view");
    in = &v;
  }
  std::vector<std::string> feature_names, target_names;
  const Matrix x = load_view_matrix(*in, &feature_names);
  const Matrix y = load_view_matrix(out, &target_names);
  Dataset d = assemble_dataset(std::filesystem::path(out.path).stem().string(), x, y,
                               out.classification, report);
  d.feature_names = feature_names;
  if (!out.classification) d.target_names = target_names;
  return d;
}

// Model options for the harness derived from the input view.
inline KsshibaOptions ksshiba_options(const RunConfig& c, Index num_features) {
  KsshibaOptions o;
  for (const auto& v : c.views) {
    if (v.spec.role != ViewRole::kInput) continue;
    o.input_representation = v.spec.representation;
    if (v.spec.kernel) o.kernel = *v.spec.kernel;
    o.double_ard = v.spec.double_ard;
    o.learn_lambda = v.spec.learn_lambda;
  }
  o.hyper = c.hyper;
  o.fit = c.fit;
  o.fit.lambda_opt = c.lambda_opt;
  o.gamma_grid = c.default_gamma_grid ? default_gamma_grid(num_features) : c.gamma_grid;
  if (c.cv) o.inner_folds = c.cv->inner_folds;
  return o;
}

}  // namespace kfa

#endif  // KFA_RUN_CONFIG_HPP
