// kfa: fit, predict, cross-validate and inspect sparse kernel factor models.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "kfa/checkpoint.hpp"
#include "kfa/fit.hpp"
#include "kfa/harness.hpp"
#include "kfa/relevance.hpp"
#include "kfa/run_config.hpp"

namespace fs = std::filesystem;
using namespace kfa;

namespace {

enum ExitCode { kOk = 0, kConfigError = 2, kNumericalError = 3, kIoError = 4 };

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> threads;
  // predict / relevance
  std::string checkpoint;
  std::vector<std::string> inputs;
  std::string target;
  std::string view;
  std::string image_shape;
  std::optional<double> threshold;
  std::string percentages;
};

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::ios_base::failure("cannot create output directory '" + dir + "': " + ec.message());
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw std::ios_base::failure("cannot write '" + path.string() + "'");
  out << std::setprecision(17);
  return out;
}

RunConfig load_config(const Options& o) {
  if (o.config.empty()) throw ConfigError("--config is required");
  RunConfig c = load_run_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (o.out) c.output_dir = *o.out;
  c.threads = resolve_threads(o.threads, c.threads);
  return c;
}

std::string output_dir(const Options& o, const std::string& fallback = ".") {
  return o.out ? *o.out : fallback;
}

int cmd_fit(const Options& o) {
  RunConfig c = load_config(o);
  LoadedViews loaded = load_views(c);
  if (loaded.rows_rejected > 0) {
    std::cerr << "rejected " << loaded.rows_rejected << " rows with missing values\n";
  }
  FitConfig cfg = c.fit;
  cfg.lambda_opt = c.lambda_opt;
  cfg.threads = c.threads;
  std::mutex log_mutex;
  cfg.on_sweep = [&](const SweepInfo& info) {
    std::lock_guard<std::mutex> lock(log_mutex);
    std::cerr << "restart " << info.restart << " iter " << info.iteration << " elbo "
              << std::setprecision(10) << info.elbo << " K " << info.active_factors << " rvs";
    for (size_t m = 0; m < info.active_rvs.size(); ++m) {
      std::cerr << ' ' << c.views[m].spec.name << '=' << info.active_rvs[m];
    }
    std::cerr << '\n';
  };
  ensure_dir(c.output_dir);
  const ModelState s = fit(loaded.inputs, c.hyper, cfg, c.seed);

  nlohmann::json extra;
  extra["columns"] = nlohmann::json::object();
  extra["class_values"] = nlohmann::json::object();
  for (size_t m = 0; m < c.views.size(); ++m) {
    extra["columns"][c.views[m].spec.name] = loaded.column_names[m];
    if (c.views[m].classification) extra["class_values"][c.views[m].spec.name] = loaded.class_values[m];
  }
  const fs::path dir = c.output_dir;
  save_checkpoint((dir / "model.ckpt").string(), s, extra);
  auto trace = open_out(dir / "elbo_trace.csv");
  trace << "iteration,elbo\n";
  for (size_t i = 0; i < s.elbo_history.size(); ++i) trace << i << ',' << s.elbo_history[i] << '\n';
  if (!trace) throw std::ios_base::failure("failed writing ELBO trace");
  std::cout << "fit: " << s.elbo_history.size() << " sweeps, K=" << s.num_factors()
            << ", final elbo " << std::setprecision(10) << s.elbo_history.back() << "\n";
  return kOk;
}

// Parses "name=path" (or a bare path when the model has a single input view).
std::map<std::string, std::string> parse_inputs(const std::vector<std::string>& args,
                                                const ModelState& s) {
  std::vector<std::string> input_names;
  for (const auto& v : s.views) {
    if (v.spec.role == ViewRole::kInput) input_names.push_back(v.spec.name);
  }
  std::map<std::string, std::string> out;
  for (const auto& a : args) {
    const auto eq = a.find('=');
    if (eq == std::string::npos) {
      if (input_names.size() != 1) throw ConfigError("--input needs NAME=PATH for multi-input models");
      out[input_names.front()] = a;
    } else {
      out[a.substr(0, eq)] = a.substr(eq + 1);
    }
  }
  for (const auto& name : input_names) {
    if (!out.count(name)) throw ConfigError("missing --input for view '" + name + "'");
  }
  return out;
}

int cmd_predict(const Options& o) {
  if (o.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  const ModelState& s = ck.state;
  std::string target = o.target;
  if (target.empty()) {
    for (const auto& v : s.views) {
      if (v.spec.role != ViewRole::kOutput) continue;
      if (!target.empty()) throw ConfigError("model has several output views; pass --target");
      target = v.spec.name;
    }
    if (target.empty()) throw ConfigError("model has no output view");
  }
  const ViewState& tv = s.view(target);
  if (tv.spec.role != ViewRole::kOutput) throw ConfigError("'" + target + "' is not an output view");

  std::map<std::string, Matrix> rows;
  Index n = -1;
  for (const auto& [name, path] : parse_inputs(o.inputs, s)) {
    const ViewState& v = s.view(name);
    if (!fs::exists(path)) throw std::ios_base::failure("cannot open '" + path + "'");
    if (fs::file_size(path) == 0) {
      if (n > 0) throw DataError("input files disagree on the number of rows");
      n = 0;
      rows[name] = Matrix(0, v.features.cols());
      continue;
    }
    const CsvTable t = read_csv_table(path);
    std::vector<std::string> expected;
    if (ck.extra.contains("columns") && ck.extra["columns"].contains(name)) {
      expected = ck.extra["columns"][name].get<std::vector<std::string>>();
    }
    if (static_cast<Index>(t.header.size()) != v.features.cols()) {
      throw DataError("input '" + name + "': expected " + std::to_string(v.features.cols()) +
                      " columns, got " + std::to_string(t.header.size()));
    }
    Matrix m = t.values;
    if (!expected.empty() && t.header != expected) {
      std::vector<Index> cols;
      for (const auto& col : expected) cols.push_back(t.column(col));
      m = select_columns(t.values, cols);
    }
    if (!m.allFinite()) throw DataError("input '" + name + "' has missing values");
    if (n >= 0 && m.rows() != n) throw DataError("input files disagree on the number of rows");
    n = m.rows();
    rows[name] = m;
  }

  std::vector<std::string> columns;
  if (ck.extra.contains("columns") && ck.extra["columns"].contains(target)) {
    columns = ck.extra["columns"][target].get<std::vector<std::string>>();
  }
  std::vector<double> class_values;
  if (ck.extra.contains("class_values") && ck.extra["class_values"].contains(target)) {
    class_values = ck.extra["class_values"][target].get<std::vector<double>>();
    columns.clear();
    for (double v : class_values) {
      std::ostringstream os;
      os << "class_" << v;
      columns.push_back(os.str());
    }
  }
  if (static_cast<Index>(columns.size()) != tv.width()) {
    columns.clear();
    for (Index j = 0; j < tv.width(); ++j) columns.push_back(target + "_" + std::to_string(j));
  }

  Matrix pred(0, tv.width());
  if (n > 0) pred = predict(s, rows, target);
  const std::string dir = output_dir(o);
  ensure_dir(dir);
  auto out = open_out(fs::path(dir) / "predictions.csv");
  for (size_t j = 0; j < columns.size(); ++j) out << (j ? "," : "") << columns[j];
  if (!class_values.empty()) out << ",label";
  out << '\n';
  const auto labels = argmax_rows(pred);
  for (Index i = 0; i < pred.rows(); ++i) {
    for (Index j = 0; j < pred.cols(); ++j) out << (j ? "," : "") << pred(i, j);
    if (!class_values.empty()) out << ',' << class_values[static_cast<size_t>(labels[i])];
    out << '\n';
  }
  if (!out) throw std::ios_base::failure("failed writing predictions");
  std::cout << "predict: " << pred.rows() << " rows\n";
  return kOk;
}

int cmd_cv(const Options& o) {
  RunConfig c = load_config(o);
  if (!c.cv) c.cv = CVPlan{};
  c.cv->seed = o.seed ? *o.seed : c.cv->seed;
  IngestReport ingest;
  const Dataset d = load_cv_dataset(c, &ingest);
  if (ingest.rows_rejected > 0) std::cerr << "rejected " << ingest.rows_rejected << " rows with missing values\n";
  KsshibaOptions opts = ksshiba_options(c, d.X.cols());
  const CvReport rep = run_cv(d, ksshiba_factory(opts), *c.cv, c.threads);
  ensure_dir(c.output_dir);
  auto out = open_out(fs::path(c.output_dir) / "cv_report.json");
  nlohmann::json j = rep.to_json();
  j["rows_rejected"] = ingest.rows_rejected;
  out << j.dump(2) << '\n';
  if (!out) throw std::ios_base::failure("failed writing cv report");
  for (const auto& m : rep.messages) std::cerr << m << '\n';
  std::cout << "cv: " << rep.metric << " " << std::setprecision(6) << rep.mean << " +- " << rep.std
            << " over " << rep.per_fold.size() << " folds, " << rep.failures << " failed\n";
  return rep.per_fold.empty() ? kNumericalError : kOk;
}

int cmd_relevance(const Options& o) {
  if (o.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  const ModelState& s = ck.state;
  const std::string dir = output_dir(o);
  ensure_dir(dir);

  auto fr = open_out(fs::path(dir) / "factor_relevance.csv");
  fr << "view,factor,relevance\n";
  const Matrix rel = factor_relevance(s);
  for (Index m = 0; m < rel.rows(); ++m) {
    for (Index k = 0; k < rel.cols(); ++k) fr << s.views[m].spec.name << ',' << k << ',' << rel(m, k) << '\n';
  }

  std::optional<std::pair<Index, Index>> shape;
  if (!o.image_shape.empty()) {
    const auto x = o.image_shape.find('x');
    if (x == std::string::npos) throw ConfigError("--image-shape must look like HxW");
    try {
      shape = std::make_pair(std::stol(o.image_shape.substr(0, x)), std::stol(o.image_shape.substr(x + 1)));
    } catch (const std::exception&) {
      throw ConfigError("--image-shape must look like HxW");
    }
  }
  const double threshold = o.threshold.value_or(LambdaOptConfig{}.select_threshold);
  int exported = 0;
  for (const auto& v : s.views) {
    if (!o.view.empty() && v.spec.name != o.view) continue;
    if (!v.spec.kernelized() || v.kernel.kind != KernelKind::kArdRbf) continue;
    const fs::path base = fs::path(dir);
    write_relevance_csv((base / ("relevance_" + v.spec.name + ".csv")).string(), v.kernel.lambda);
    const auto mask = select_features(v.kernel.lambda, threshold);
    auto mo = open_out(base / ("mask_" + v.spec.name + ".csv"));
    mo << "feature_index,selected\n";
    for (size_t d = 0; d < mask.size(); ++d) mo << d << ',' << (mask[d] ? 1 : 0) << '\n';
    if (shape) {
      write_relevance_pgm((base / ("relevance_" + v.spec.name + ".pgm")).string(), v.kernel.lambda,
                          shape->first, shape->second);
    }
    ++exported;
  }
  if (!o.view.empty() && exported == 0) {
    throw ConfigError("view '" + o.view + "' does not exist or has no ard_rbf kernel");
  }
  std::cout << "relevance: exported " << exported << " view(s)\n";
  return kOk;
}

int cmd_rv_sweep(const Options& o) {
  RunConfig c = load_config(o);
  if (!c.cv) c.cv = CVPlan{};
  if (o.seed) c.cv->seed = *o.seed;
  std::vector<double> percentages = c.rv_percentages;
  if (!o.percentages.empty()) {
    percentages.clear();
    std::istringstream in(o.percentages);
    std::string item;
    while (std::getline(in, item, ',')) {
      try {
        percentages.push_back(std::stod(item));
      } catch (const std::exception&) {
        throw ConfigError("--percentages must be a comma separated list of numbers");
      }
    }
  }
  if (percentages.empty()) throw ConfigError("no RV percentages given");
  const Dataset d = load_cv_dataset(c);
  const auto curve = rv_sweep(d, percentages, *c.cv, ksshiba_options(c, d.X.cols()), c.threads);
  ensure_dir(c.output_dir);
  write_curve_csv((fs::path(c.output_dir) / "rv_curve.csv").string(), curve);
  for (const auto& p : curve) {
    std::cout << "rv-sweep: " << p.percent << "% -> " << std::setprecision(6) << p.mean << " +- " << p.std << '\n';
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse Bayesian factor analysis with kernelized observations"};
  app.require_subcommand(1);
  Options o;
  app.add_option("--config", o.config, "JSON run configuration");
  app.add_option("--seed", o.seed, "random seed (overrides config)");
  app.add_option("--out", o.out, "output directory (overrides config)");
  app.add_option("--threads", o.threads, "worker threads, 0 = one per core");

  auto* fit_cmd = app.add_subcommand("fit", "fit a model and write a checkpoint");
  auto* predict_cmd = app.add_subcommand("predict", "predict an output view for new inputs");
  predict_cmd->add_option("--checkpoint", o.checkpoint, "checkpoint written by fit")->required();
  predict_cmd->add_option("--input", o.inputs, "NAME=PATH input CSV (repeatable)")->required();
  predict_cmd->add_option("--target", o.target, "output view to predict");
  auto* cv_cmd = app.add_subcommand("cv", "cross-validate the configured model");
  auto* rel_cmd = app.add_subcommand("relevance", "export feature and factor relevances");
  rel_cmd->add_option("--checkpoint", o.checkpoint, "checkpoint written by fit")->required();
  rel_cmd->add_option("--view", o.view, "restrict to one view");
  rel_cmd->add_option("--image-shape", o.image_shape, "HxW rendering of the relevance mask");
  rel_cmd->add_option("--threshold", o.threshold, "selection threshold relative to the largest relevance");
  auto* sweep_cmd = app.add_subcommand("rv-sweep", "cross-validated score against RV budget");
  sweep_cmd->add_option("--percentages", o.percentages, "comma separated RV budgets in percent");
  for (auto* sub : {fit_cmd, predict_cmd, cv_cmd, rel_cmd, sweep_cmd}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }

  try {
    if (*fit_cmd) return cmd_fit(o);
    if (*predict_cmd) return cmd_predict(o);
    if (*cv_cmd) return cmd_cv(o);
    if (*rel_cmd) return cmd_relevance(o);
    if (*sweep_cmd) return cmd_rv_sweep(o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumericalError;
  } catch (const FitError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumericalError;
  } catch (const CheckpointError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIoError;
  } catch (const DataError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIoError;
  } catch (const std::ios_base::failure& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIoError;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kIoError;
  }
  return kConfigError;
}
