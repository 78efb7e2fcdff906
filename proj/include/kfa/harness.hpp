#ifndef KFA_HARNESS_HPP
#define KFA_HARNESS_HPP

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "kfa/fit.hpp"
#include "kfa/kernels.hpp"
#include "kfa/model.hpp"

namespace kfa {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------- datasets

struct Dataset {
  std::string name;
  Matrix X;  // N x D
  Matrix Y;  // N x C, one-hot for classification
  std::vector<std::string> feature_names, target_names;
  std::vector<Index> labels;        // classification only, values in [0, num_classes)
  std::vector<double> class_values; // original label value of each class
  Index num_classes = 0;

  bool classification() const { return num_classes > 0; }
  Index rows() const { return X.rows(); }

  void validate() const {
    if (X.rows() < 10) throw DataError("dataset '" + name + "' needs at least 10 rows");
    if (Y.rows() != X.rows()) throw DataError("dataset '" + name + "': X and Y row counts differ");
    if (X.cols() == 0 || Y.cols() == 0) throw DataError("dataset '" + name + "' has no features or targets");
    if (!X.allFinite() || !Y.allFinite()) throw DataError("dataset '" + name + "' contains non-finite values");
    if (classification() && static_cast<Index>(labels.size()) != X.rows()) {
      throw DataError("dataset '" + name + "': label count does not match rows");
    }
  }
};

struct IngestReport {
  Index rows_read = 0;
  Index rows_rejected = 0;  // rows with a missing or NaN cell
};

// One-hot encoding of integer class ids.
inline Matrix one_hot(const std::vector<Index>& labels, Index num_classes) {
  Matrix out = Matrix::Zero(static_cast<Index>(labels.size()), num_classes);
  for (size_t i = 0; i < labels.size(); ++i) out(static_cast<Index>(i), labels[i]) = 1.0;
  return out;
}

// Classification dataset from raw label values; classes are the sorted
// distinct values.
inline Dataset make_classification_dataset(std::string name, Matrix x,
                                           const std::vector<double>& label_values) {
  Dataset d;
  d.name = std::move(name);
  d.X = std::move(x);
  d.class_values = label_values;
  std::sort(d.class_values.begin(), d.class_values.end());
  d.class_values.erase(std::unique(d.class_values.begin(), d.class_values.end()),
                       d.class_values.end());
  d.num_classes = static_cast<Index>(d.class_values.size());
  if (d.num_classes < 2) throw DataError("dataset '" + d.name + "' needs at least two classes");
  for (double v : label_values) {
    d.labels.push_back(std::lower_bound(d.class_values.begin(), d.class_values.end(), v) -
                       d.class_values.begin());
  }
  d.Y = one_hot(d.labels, d.num_classes);
  for (double v : d.class_values) {
    std::ostringstream os;
    os << "class_" << v;
    d.target_names.push_back(os.str());
  }
  d.validate();
  return d;
}

inline Dataset make_regression_dataset(std::string name, Matrix x, Matrix y) {
  Dataset d;
  d.name = std::move(name);
  d.X = std::move(x);
  d.Y = std::move(y);
  d.validate();
  return d;
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\"");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\"");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

// Parses a numeric cell; empty, "nan", "na" and "?" give NaN.
inline double parse_cell(const std::string& cell, Index line_no) {
  std::string lower = cell;
  std::transform(lower.begin(), lower.end(), lower.begin(), ::tolower);
  if (lower.empty() || lower == "nan" || lower == "na" || lower == "?") {
    return std::numeric_limits<double>::quiet_NaN();
  }
  double value = 0.0;
  const char* first = cell.data();
  if (*first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, cell.data() + cell.size(), value);
  if (ec != std::errc() || ptr != cell.data() + cell.size()) {
    throw DataError("line " + std::to_string(line_no) + ": non-numeric cell '" + cell + "'");
  }
  return value;
}

}  // namespace detail

// Headed numeric CSV; missing cells ("", "nan", "na", "?") become NaN.
struct CsvTable {
  std::vector<std::string> header;
  Matrix values;

  Index column(const std::string& name) const {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw DataError("column '" + name + "' not in header");
    return it - header.begin();
  }
};

inline CsvTable read_csv_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::ios_base::failure("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw DataError("'" + path + "' is empty");
  CsvTable t;
  t.header = detail::split_csv_line(line);
  std::vector<std::vector<double>> rows;
  Index line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != t.header.size()) {
      throw DataError("'" + path + "' line " + std::to_string(line_no) + ": expected " +
                      std::to_string(t.header.size()) + " cells, got " + std::to_string(cells.size()));
    }
    std::vector<double> values(cells.size());
    for (size_t c = 0; c < cells.size(); ++c) values[c] = detail::parse_cell(cells[c], line_no);
    rows.push_back(std::move(values));
  }
  t.values.resize(static_cast<Index>(rows.size()), static_cast<Index>(t.header.size()));
  for (size_t i = 0; i < rows.size(); ++i) {
    for (size_t c = 0; c < rows[i].size(); ++c) t.values(static_cast<Index>(i), static_cast<Index>(c)) = rows[i][c];
  }
  return t;
}

inline Matrix select_columns(const Matrix& m, const std::vector<Index>& cols) {
  Matrix out(m.rows(), static_cast<Index>(cols.size()));
  for (size_t j = 0; j < cols.size(); ++j) out.col(static_cast<Index>(j)) = m.col(cols[j]);
  return out;
}

// Builds a dataset from separate feature and target matrices (rows aligned).
// Rows with any non-finite cell are dropped and counted. With
// `classification` the single target column holds class labels.
inline Dataset assemble_dataset(std::string name, const Matrix& x, const Matrix& y,
                                bool classification, IngestReport* report = nullptr) {
  if (x.rows() != y.rows()) throw DataError("features and targets have different row counts");
  if (classification && y.cols() != 1) throw DataError("classification needs exactly one label column");
  std::vector<Index> keep;
  for (Index i = 0; i < x.rows(); ++i) {
    if (x.row(i).allFinite() && y.row(i).allFinite()) keep.push_back(i);
  }
  if (report) *report = {x.rows(), x.rows() - static_cast<Index>(keep.size())};
  const Matrix xs = gather_rows(x, keep), ys = gather_rows(y, keep);
  if (classification) {
    return make_classification_dataset(std::move(name), xs, std::vector<double>(ys.data(), ys.data() + ys.size()));
  }
  return make_regression_dataset(std::move(name), xs, ys);
}

// Reads a headed CSV; `targets` names the target columns and every other
// column is a feature.
inline Dataset read_csv_dataset(const std::string& path, const std::vector<std::string>& targets,
                                bool classification = false, std::string name = "",
                                IngestReport* report = nullptr) {
  if (targets.empty()) throw DataError("no target columns given");
  const CsvTable t = read_csv_table(path);
  std::vector<Index> target_cols, feature_cols;
  for (const auto& name_t : targets) target_cols.push_back(t.column(name_t));
  for (Index c = 0; c < static_cast<Index>(t.header.size()); ++c) {
    if (std::find(target_cols.begin(), target_cols.end(), c) == target_cols.end()) feature_cols.push_back(c);
  }
  if (feature_cols.empty()) throw DataError("'" + path + "' has no feature columns");
  Dataset d = assemble_dataset(name.empty() ? path : name, select_columns(t.values, feature_cols),
                               select_columns(t.values, target_cols), classification, report);
  for (Index c : feature_cols) d.feature_names.push_back(t.header[c]);
  if (!classification) d.target_names = targets;
  return d;
}

// ----------------------------------------------------------------- metrics

// Mean coefficient of determination over target columns. Zero-variance
// columns are skipped and reported in `warnings`.
inline double r2_score(const Matrix& y_true, const Matrix& y_pred,
                       std::vector<std::string>* warnings = nullptr) {
  if (y_true.rows() != y_pred.rows() || y_true.cols() != y_pred.cols()) {
    throw std::invalid_argument("r2_score: shape mismatch");
  }
  double total = 0.0;
  Index used = 0;
  for (Index c = 0; c < y_true.cols(); ++c) {
    const double mean = y_true.col(c).mean();
    const double ss_tot = (y_true.col(c).array() - mean).square().sum();
    if (!(ss_tot > 0.0)) {
      if (warnings) warnings->push_back("r2_score: target column " + std::to_string(c) + " has zero variance; excluded");
      continue;
    }
    total += 1.0 - (y_true.col(c) - y_pred.col(c)).squaredNorm() / ss_tot;
    ++used;
  }
  if (used == 0) throw std::invalid_argument("r2_score: every target column has zero variance");
  return total / static_cast<double>(used);
}

// Ranks with ties given their average rank (1-based).
inline Vector average_ranks(const Vector& x) {
  const Index n = x.size();
  std::vector<Index> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return x(a) < x(b); });
  Vector ranks(n);
  for (Index i = 0; i < n;) {
    Index j = i;
    while (j + 1 < n && x(order[j + 1]) == x(order[i])) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (Index t = i; t <= j; ++t) ranks(order[t]) = r;
    i = j + 1;
  }
  return ranks;
}

// Unweighted mean of one-vs-rest AUCs (Mann-Whitney statistic). Classes
// with no positive or no negative sample are skipped with a warning.
inline double macro_auc(const std::vector<Index>& labels, const Matrix& scores,
                        std::vector<std::string>* warnings = nullptr) {
  if (static_cast<Index>(labels.size()) != scores.rows()) {
    throw std::invalid_argument("macro_auc: label count does not match score rows");
  }
  double total = 0.0;
  Index used = 0;
  for (Index c = 0; c < scores.cols(); ++c) {
    const Vector ranks = average_ranks(scores.col(c));
    double pos = 0.0, rank_sum = 0.0;
    for (size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == c) {
        pos += 1.0;
        rank_sum += ranks(static_cast<Index>(i));
      }
    }
    const double neg = static_cast<double>(labels.size()) - pos;
    if (pos == 0.0 || neg == 0.0) {
      if (warnings) warnings->push_back("macro_auc: class " + std::to_string(c) + " lacks positives or negatives; excluded");
      continue;
    }
    total += (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
    ++used;
  }
  if (used == 0) throw std::invalid_argument("macro_auc: no class has both positives and negatives");
  return total / static_cast<double>(used);
}

inline double accuracy(const std::vector<Index>& labels, const Matrix& scores) {
  const auto pred = argmax_rows(scores);
  double hits = 0.0;
  for (size_t i = 0; i < labels.size(); ++i) hits += pred[i] == labels[i] ? 1.0 : 0.0;
  return labels.empty() ? 0.0 : hits / static_cast<double>(labels.size());
}

// ------------------------------------------------------------------- folds

struct CVPlan {
  int outer_folds = 10;
  int inner_folds = 3;
  std::uint64_t seed = 0;
  bool standardize = true;

  void validate() const {
    if (outer_folds < 2) throw std::invalid_argument("outer_folds must be >= 2");
    if (inner_folds < 2) throw std::invalid_argument("inner_folds must be >= 2");
  }
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Fold id of every row: splitmix64(splitmix64(seed) + row) mod folds.
inline std::vector<int> fold_assignment(Index rows, int folds, std::uint64_t seed) {
  if (folds < 2) throw std::invalid_argument("fold_assignment: folds must be >= 2");
  std::vector<int> out(static_cast<size_t>(rows));
  const std::uint64_t base = splitmix64(seed);
  for (Index i = 0; i < rows; ++i) {
    out[static_cast<size_t>(i)] =
        static_cast<int>(splitmix64(base + static_cast<std::uint64_t>(i)) % static_cast<std::uint64_t>(folds));
  }
  return out;
}

// Column z-scoring with statistics from one split.
struct Standardizer {
  Vector mean, scale;

  static Standardizer fit(const Matrix& m) {
    Standardizer s;
    s.mean = m.colwise().mean().transpose();
    s.scale.resize(m.cols());
    for (Index c = 0; c < m.cols(); ++c) {
      const double sd = std::sqrt((m.col(c).array() - s.mean(c)).square().mean());
      s.scale(c) = sd > 0.0 ? sd : 1.0;
    }
    return s;
  }
  Matrix apply(const Matrix& m) const {
    return ((m.rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array()).matrix();
  }
  Matrix invert(const Matrix& m) const {
    return ((m.array().rowwise() * scale.transpose().array()).rowwise() + mean.transpose().array()).matrix();
  }
};

// ---------------------------------------------------------------------- CV

// Training split plus test inputs handed to a model. Test targets are
// withheld; `test_rows` are dataset row indices.
struct FoldData {
  Matrix x_train, y_train, x_test;
  std::vector<Index> labels_train;
  Index num_classes = 0;
  std::vector<Index> train_rows, test_rows;
  std::uint64_t seed = 0;
};

struct FoldOutput {
  Matrix scores;  // test rows x targets (or classes)
  Index factors = 0;
  double rv_percent = 100.0;
};

class FoldModel {
 public:
  virtual ~FoldModel() = default;
  virtual FoldOutput fit_predict(const FoldData& fold) = 0;
};

using ModelFactory = std::function<std::unique_ptr<FoldModel>()>;

struct CvReport {
  std::string dataset;
  std::string metric;  // "r2" or "auc"
  std::vector<int> folds;  // fold ids that produced a score
  std::vector<double> per_fold;
  double mean = 0.0;
  double std = 0.0;
  std::vector<Index> factors;
  std::vector<double> rv_percent;
  int failures = 0;
  std::vector<std::string> messages;

  nlohmann::json to_json() const {
    return {{"dataset", dataset},       {"metric", metric},   {"folds", folds},
            {"per_fold", per_fold},     {"mean", mean},       {"std", std},
            {"factors", factors},       {"rv_percent", rv_percent},
            {"failures", failures},     {"messages", messages}};
  }
};

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  const double sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  return {mean, sd};
}

namespace detail {

inline FoldData make_fold(const Dataset& d, const std::vector<Index>& train,
                          const std::vector<Index>& test, bool standardize,
                          Standardizer* y_scaler) {
  FoldData f;
  f.train_rows = train;
  f.test_rows = test;
  f.num_classes = d.num_classes;
  f.x_train = gather_rows(d.X, train);
  f.x_test = gather_rows(d.X, test);
  f.y_train = gather_rows(d.Y, train);
  if (d.classification()) {
    for (Index i : train) f.labels_train.push_back(d.labels[static_cast<size_t>(i)]);
  }
  if (standardize) {
    const Standardizer sx = Standardizer::fit(f.x_train);
    f.x_train = sx.apply(f.x_train);
    f.x_test = sx.apply(f.x_test);
    if (!d.classification()) {
      *y_scaler = Standardizer::fit(f.y_train);
      f.y_train = y_scaler->apply(f.y_train);
    }
  }
  return f;
}

template <typename Fn>
void run_parallel(int count, int threads, Fn&& fn) {
  threads = std::max(1, std::min(threads, count));
  if (threads == 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      for (int i = t; i < count; i += threads) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace detail

// Outer cross-validation. Each fold gets a fresh model from `factory` and
// seed plan.seed + fold. Failing folds are excluded and counted.
inline CvReport run_cv(const Dataset& d, const ModelFactory& factory, const CVPlan& plan,
                       int threads = 1) {
  plan.validate();
  d.validate();
  const auto assign = fold_assignment(d.rows(), plan.outer_folds, plan.seed);
  struct Result {
    bool ran = false;
    bool ok = false;
    double score = 0.0;
    Index factors = 0;
    double rv_percent = 0.0;
    std::string message;
  };
  std::vector<Result> results(static_cast<size_t>(plan.outer_folds));
  detail::run_parallel(plan.outer_folds, threads, [&](int f) {
    std::vector<Index> train, test;
    for (Index i = 0; i < d.rows(); ++i) (assign[i] == f ? test : train).push_back(i);
    Result& r = results[static_cast<size_t>(f)];
    if (test.empty() || train.empty()) return;
    r.ran = true;
    try {
      Standardizer y_scaler;
      FoldData fold = detail::make_fold(d, train, test, plan.standardize, &y_scaler);
      fold.seed = plan.seed + static_cast<std::uint64_t>(f);
      auto model = factory();
      FoldOutput out = model->fit_predict(fold);
      if (out.scores.rows() != static_cast<Index>(test.size()) || out.scores.cols() != d.Y.cols()) {
        throw std::runtime_error("model returned predictions of the wrong shape");
      }
      if (d.classification()) {
        std::vector<Index> labels;
        for (Index i : test) labels.push_back(d.labels[static_cast<size_t>(i)]);
        r.score = macro_auc(labels, out.scores);
      } else {
        const Matrix pred = plan.standardize ? y_scaler.invert(out.scores) : out.scores;
        r.score = r2_score(gather_rows(d.Y, test), pred);
      }
      r.factors = out.factors;
      r.rv_percent = out.rv_percent;
      r.ok = std::isfinite(r.score);
      if (!r.ok) r.message = "fold " + std::to_string(f) + ": non-finite score";
    } catch (const std::exception& e) {
      r.message = "fold " + std::to_string(f) + ": " + e.what();
    }
  });

  CvReport rep;
  rep.dataset = d.name;
  rep.metric = d.classification() ? "auc" : "r2";
  for (int f = 0; f < plan.outer_folds; ++f) {
    const Result& r = results[static_cast<size_t>(f)];
    if (!r.ran) continue;
    if (!r.ok) {
      ++rep.failures;
      rep.messages.push_back(r.message);
      continue;
    }
    rep.folds.push_back(f);
    rep.per_fold.push_back(r.score);
    rep.factors.push_back(r.factors);
    rep.rv_percent.push_back(r.rv_percent);
  }
  std::tie(rep.mean, rep.std) = mean_std(rep.per_fold);
  return rep;
}

// --------------------------------------------------------- KSSHIBA wrapper

struct KsshibaOptions {
  Representation input_representation = Representation::kKernelized;
  KernelConfig kernel;
  bool double_ard = false;
  bool learn_lambda = false;
  Hyperparams hyper;
  FitConfig fit;
  // Candidate RBF widths chosen by inner CV on the training split; empty
  // keeps `kernel` as given.
  std::vector<double> gamma_grid;
  int inner_folds = 3;
  int threads = 1;
};

// 20 log-spaced widths in [1e-8, 10^0.5], divided by the feature count.
inline std::vector<double> default_gamma_grid(Index num_features) {
  std::vector<double> grid;
  const double lo = -8.0, hi = 0.5;
  for (int i = 0; i < 20; ++i) {
    const double e = lo + (hi - lo) * static_cast<double>(i) / 19.0;
    grid.push_back(std::pow(10.0, e) / static_cast<double>(std::max<Index>(1, num_features)));
  }
  return grid;
}

// Semi-supervised fit: test inputs join the training rows with the output
// view masked; predictions are posterior means at the masked rows.
class KsshibaModel : public FoldModel {
 public:
  explicit KsshibaModel(KsshibaOptions opts) : opts_(std::move(opts)) {}

  FoldOutput fit_predict(const FoldData& fold) override {
    KernelConfig kernel = opts_.kernel;
    if (!opts_.gamma_grid.empty() && opts_.input_representation == Representation::kKernelized) {
      kernel.gamma = select_gamma(fold);
    }
    ModelState s = fit_transductive(fold.x_train, fold.y_train, fold.x_test, kernel, fold.seed);
    FoldOutput out;
    out.scores = predict_transductive(s, "y").bottomRows(fold.x_test.rows());
    out.factors = s.num_factors();
    const ViewState& x = s.view("x");
    out.rv_percent = x.spec.kernelized()
                         ? 100.0 * static_cast<double>(x.width()) / static_cast<double>(x.basis.size())
                         : 100.0;
    return out;
  }

  ModelState fit_transductive(const Matrix& x_train, const Matrix& y_train, const Matrix& x_test,
                              const KernelConfig& kernel, std::uint64_t seed) const {
    const Index nt = x_train.rows(), ne = x_test.rows();
    Matrix x(nt + ne, x_train.cols());
    x << x_train, x_test;
    Matrix y = Matrix::Zero(nt + ne, y_train.cols());
    y.topRows(nt) = y_train;
    std::vector<bool> mask(static_cast<size_t>(nt + ne), false);
    std::fill(mask.begin(), mask.begin() + nt, true);

    ViewSpec in{"x", ViewRole::kInput, opts_.input_representation, std::nullopt, false, false};
    if (opts_.input_representation == Representation::kKernelized) {
      in.kernel = kernel;
      in.double_ard = opts_.double_ard;
      in.learn_lambda = opts_.learn_lambda;
    }
    ViewSpec out{"y", ViewRole::kOutput, Representation::kPrimal, std::nullopt, false, false};
    FitConfig cfg = opts_.fit;
    cfg.threads = opts_.threads;
    return fit({{in, {x, {}}}, {out, {y, mask}}}, opts_.hyper, cfg, seed);
  }

 private:
  double select_gamma(const FoldData& fold) const {
    const Index n = fold.x_train.rows();
    const auto assign = fold_assignment(n, opts_.inner_folds, splitmix64(fold.seed));
    double best_score = -std::numeric_limits<double>::infinity();
    double best_gamma = opts_.gamma_grid.front();
    for (double g : opts_.gamma_grid) {
      KernelConfig k = opts_.kernel;
      k.gamma = g;
      std::vector<double> scores;
      for (int f = 0; f < opts_.inner_folds; ++f) {
        std::vector<Index> tr, te;
        for (Index i = 0; i < n; ++i) (assign[i] == f ? te : tr).push_back(i);
        if (tr.empty() || te.empty()) continue;
        try {
          ModelState s = fit_transductive(gather_rows(fold.x_train, tr), gather_rows(fold.y_train, tr),
                                          gather_rows(fold.x_train, te),
                                          k, fold.seed);
          const Matrix pred = predict_transductive(s, "y").bottomRows(static_cast<Index>(te.size()));
          if (fold.num_classes > 0) {
            std::vector<Index> labels;
            for (Index i : te) labels.push_back(fold.labels_train[static_cast<size_t>(i)]);
            scores.push_back(macro_auc(labels, pred));
          } else {
            scores.push_back(r2_score(gather_rows(fold.y_train, te), pred));
          }
        } catch (const std::exception&) {
          scores.push_back(-std::numeric_limits<double>::infinity());
        }
      }
      const double mean = mean_std(scores).first;
      if (mean > best_score) {
        best_score = mean;
        best_gamma = g;
      }
    }
    return best_gamma;
  }

  KsshibaOptions opts_;
};

inline ModelFactory ksshiba_factory(const KsshibaOptions& opts) {
  return [opts] { return std::make_unique<KsshibaModel>(opts); };
}

// ---------------------------------------------------------------- RV sweep

struct CurvePoint {
  double percent = 0.0;
  double mean = 0.0;
  double std = 0.0;
  double rv_percent = 0.0;  // mean achieved RV share
};

// CV score of double-ARD fits capped to each RV budget (percent of the
// basis, RVs with the smallest <gamma> kept).
inline std::vector<CurvePoint> rv_sweep(const Dataset& d, const std::vector<double>& percentages,
                                        const CVPlan& plan, KsshibaOptions opts, int threads = 1) {
  plan.validate();
  if (opts.input_representation != Representation::kKernelized) {
    throw std::invalid_argument("rv_sweep needs a kernelized input view");
  }
  for (double p : percentages) {
    if (!(p > 0.0 && p <= 100.0)) throw std::invalid_argument("rv_sweep: percentages must lie in (0, 100]");
    if (p / 100.0 * static_cast<double>(d.rows()) < 1.0) {
      throw std::invalid_argument("rv_sweep: budget of " + std::to_string(p) + "% is below one RV");
    }
  }
  opts.double_ard = true;
  std::vector<CurvePoint> curve;
  for (double p : percentages) {
    KsshibaOptions o = opts;
    o.fit.rv_budget = p / 100.0;
    const CvReport rep = run_cv(d, ksshiba_factory(o), plan, threads);
    CurvePoint pt{p, rep.mean, rep.std, mean_std(rep.rv_percent).first};
    curve.push_back(pt);
  }
  return curve;
}

inline void write_curve_csv(const std::string& path, const std::vector<CurvePoint>& curve) {
  std::ofstream out(path);
  if (!out) throw std::ios_base::failure("cannot write '" + path + "'");
  out << "percent,mean,std,rv_percent\n" << std::setprecision(17);
  for (const auto& p : curve) out << p.percent << ',' << p.mean << ',' << p.std << ',' << p.rv_percent << '\n';
  if (!out) throw std::ios_base::failure("failed writing '" + path + "'");
}

// ---------------------------------------------------------------------- MKL

// mu K1 + (1 - mu) K2.
inline Matrix mix_kernels(const Matrix& k1, const Matrix& k2, double mu) {
  if (k1.rows() != k2.rows() || k1.cols() != k2.cols()) {
    throw std::invalid_argument("mix_kernels: shape mismatch");
  }
  if (!(mu >= 0.0 && mu <= 1.0)) throw std::invalid_argument("mix_kernels: mu must lie in [0, 1]");
  return mu * k1 + (1.0 - mu) * k2;
}

// <tau_m> tr<A_m^T A_m>: each view's contribution to the latent precision.
inline Vector tau_weighted_power(const ModelState& s) {
  Vector out(static_cast<Index>(s.views.size()));
  for (size_t m = 0; m < s.views.size(); ++m) {
    const auto& v = s.views[m];
    out(static_cast<Index>(m)) = v.tau.mean(0) * dual_second_moment(v.dual).trace();
  }
  return out;
}

}  // namespace kfa

#endif  // KFA_HARNESS_HPP
