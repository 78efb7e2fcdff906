#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "kfa/run_config.hpp"

using namespace kfa;
using nlohmann::json;

namespace {

class RunConfigTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = std::filesystem::temp_directory_path() / "kfa_run_config_test";
    std::filesystem::create_directories(dir_);
    std::ofstream x(dir_ / "x.csv");
    x << "a,b\n";
    for (int i = 0; i < 12; ++i) x << i << ',' << (i * 7) % 5 << '\n';
    x << "nan,1\n";
    std::ofstream y(dir_ / "y.csv");
    y << "t,label\n";
    for (int i = 0; i < 12; ++i) {
      if (i == 4) {
        y << ",\n";  // unobserved output row
      } else {
        y << 0.5 * i << ',' << i % 2 << '\n';
      }
    }
    y << "1,1\n";
  }
  void TearDown() override { std::filesystem::remove_all(dir_); }

  json base() const {
    return {{"views",
             {{{"name", "x"}, {"path", "x.csv"}, {"kernel", {{"kind", "rbf"}, {"gamma", 0.5}}}},
              {{"name", "y"}, {"role", "output"}, {"path", "y.csv"}, {"columns", {"t"}}}}}};
  }

  RunConfig parse(const json& j) const { return parse_run_config(j, dir_); }

  std::filesystem::path dir_;
};

}  // namespace

TEST_F(RunConfigTest, DefaultsAndPaths) {
  const RunConfig c = parse(base());
  ASSERT_EQ(c.views.size(), 2u);
  EXPECT_EQ(c.views[0].spec.representation, Representation::kKernelized);
  EXPECT_EQ(c.views[0].spec.kernel->gamma, 0.5);
  EXPECT_EQ(c.views[1].spec.representation, Representation::kPrimal);
  EXPECT_EQ(c.views[0].path, (dir_ / "x.csv").string());
  EXPECT_EQ(c.fit.restarts, FitConfig{}.restarts);
  EXPECT_EQ(c.seed, 0u);
  EXPECT_FALSE(c.cv);
  EXPECT_EQ(c.output_view().spec.name, "y");
}

TEST_F(RunConfigTest, ReadsEverySection) {
  json j = base();
  j["hyper"] = {{"k_init", 7}, {"a_tau", 2.0}};
  j["fit"] = {{"restarts", 3}, {"max_iters", 500}, {"rv_budget", 0.5}};
  j["lambda_opt"] = {{"step_size", 0.01}, {"steps_per_sweep", 3}};
  j["cv"] = {{"outer_folds", 5}, {"seed", 9}};
  j["gamma_grid"] = "default";
  j["rv_percentages"] = {50, 100};
  j["image_shape"] = {2, 1};
  j["seed"] = 42;
  j["threads"] = 2;
  j["output_dir"] = "out";
  const RunConfig c = parse(j);
  EXPECT_EQ(c.hyper.k_init, 7);
  EXPECT_EQ(c.hyper.a_tau, 2.0);
  EXPECT_EQ(c.fit.restarts, 3);
  EXPECT_EQ(c.fit.rv_budget, 0.5);
  EXPECT_EQ(c.lambda_opt->steps_per_sweep, 3);
  EXPECT_EQ(c.cv->outer_folds, 5);
  EXPECT_EQ(c.cv->seed, 9u);
  EXPECT_TRUE(c.default_gamma_grid);
  EXPECT_EQ(c.rv_percentages, (std::vector<double>{50, 100}));
  EXPECT_EQ(c.image_shape, std::make_pair(Index{2}, Index{1}));
  EXPECT_EQ(c.seed, 42u);
  EXPECT_EQ(c.threads, 2);
  const KsshibaOptions o = ksshiba_options(c, 2);
  EXPECT_EQ(o.gamma_grid.size(), 20u);
  EXPECT_EQ(o.kernel.kind, KernelKind::kRbf);
  EXPECT_EQ(o.fit.lambda_opt->step_size, 0.01);
}

TEST_F(RunConfigTest, Errors) {
  auto expect_error = [&](json j, const char* why) {
    EXPECT_THROW(parse(j), ConfigError) << why;
  };
  json j = base();
  j["bogus"] = 1;
  expect_error(j, "unknown top-level key");
  j = base();
  j["views"][0]["kernel"]["width"] = 1;
  expect_error(j, "unknown kernel key");
  j = base();
  j["views"][0]["path"] = "missing.csv";
  expect_error(j, "missing data file");
  j = base();
  j["views"][1]["name"] = "x";
  expect_error(j, "duplicate name");
  j = base();
  j["views"][0]["role"] = "output";
  expect_error(j, "no input view");
  j = base();
  j["views"][0]["role"] = "sideways";
  expect_error(j, "bad role");
  j = base();
  j["views"][1]["kernel"] = {{"kind", "linear"}};
  j["views"][1]["representation"] = "primal";
  expect_error(j, "primal view with a kernel");
  j = base();
  j["views"][0]["double_ard"] = true;
  j["views"][0]["representation"] = "primal";
  j["views"][0].erase("kernel");
  expect_error(j, "double ARD on a primal view");
  j = base();
  j["views"][1]["role"] = "input";
  j["cv"] = json::object();
  expect_error(j, "cv without an output view");
  j = base();
  j["fit"] = {{"restarts", 0}};
  expect_error(j, "restarts 0");
  j = base();
  j["hyper"] = {{"b_tau", -1.0}};
  expect_error(j, "negative prior");
  j = base();
  j["rv_percentages"] = {150};
  expect_error(j, "percentage above 100");
  j = base();
  j["gamma_grid"] = "wide";
  expect_error(j, "bad gamma grid");
  j = base();
  j["image_shape"] = {3};
  expect_error(j, "bad image shape");
  j = base();
  j["seed"] = "seven";
  expect_error(j, "seed of the wrong type");
  expect_error(json::array(), "not an object");
  expect_error(json{{"views", json::array()}}, "no views");
}

TEST_F(RunConfigTest, LoadFromFile) {
  const auto path = dir_ / "run.json";
  std::ofstream(path) << base().dump();
  EXPECT_EQ(load_run_config(path.string()).views.size(), 2u);
  std::ofstream(dir_ / "bad.json") << "{ not json";
  EXPECT_THROW(load_run_config((dir_ / "bad.json").string()), ConfigError);
  EXPECT_THROW(load_run_config((dir_ / "none.json").string()), std::ios_base::failure);
}

TEST_F(RunConfigTest, LoadViewsMasksMissingOutputs) {
  const LoadedViews lv = load_views(parse(base()));
  ASSERT_EQ(lv.inputs.size(), 2u);
  EXPECT_EQ(lv.rows_rejected, 1);  // NaN feature row
  EXPECT_EQ(lv.inputs[0].data.X.rows(), 12);
  const auto& mask = lv.inputs[1].data.observed;
  ASSERT_EQ(mask.size(), 12u);
  EXPECT_FALSE(mask[4]);
  EXPECT_TRUE(mask[5]);
  EXPECT_EQ(lv.inputs[1].data.X(4, 0), 0.0);
  EXPECT_EQ(lv.column_names[1], (std::vector<std::string>{"t"}));
}

TEST_F(RunConfigTest, LoadViewsOneHotLabels) {
  json j = base();
  j["views"][1]["columns"] = {"label"};
  j["views"][1]["classification"] = true;
  const LoadedViews lv = load_views(parse(j));
  EXPECT_EQ(lv.class_values[1], (std::vector<double>{0.0, 1.0}));
  const Matrix& y = lv.inputs[1].data.X;
  ASSERT_EQ(y.cols(), 2);
  EXPECT_EQ(y(3, 1), 1.0);
  EXPECT_EQ(y.row(4).sum(), 0.0);
  j["views"][0]["classification"] = true;
  EXPECT_THROW(parse(j), ConfigError);
}

TEST_F(RunConfigTest, CvDatasetUsesSingleInputView) {
  json j = base();
  j["cv"] = {{"outer_folds", 3}};
  IngestReport rep;
  const Dataset d = load_cv_dataset(parse(j), &rep);
  EXPECT_EQ(d.rows(), 11);  // NaN feature row and missing target row dropped
  EXPECT_EQ(rep.rows_rejected, 2);
  EXPECT_EQ(d.feature_names, (std::vector<std::string>{"a", "b"}));
  j["views"].push_back({{"name", "x2"}, {"path", "x.csv"}});
  EXPECT_THROW(load_cv_dataset(parse(j)), ConfigError);
}

TEST(ResolveThreads, FlagThenEnvThenConfig) {
  unsetenv("KFA_THREADS");
  EXPECT_EQ(resolve_threads(std::nullopt, 3), 3);
  setenv("KFA_THREADS", "2", 1);
  EXPECT_EQ(resolve_threads(std::nullopt, 3), 2);
  EXPECT_EQ(resolve_threads(5, 3), 5);
  EXPECT_GE(resolve_threads(0), 1);
  setenv("KFA_THREADS", "many", 1);
  EXPECT_THROW(resolve_threads(std::nullopt), ConfigError);
  unsetenv("KFA_THREADS");
  EXPECT_THROW(resolve_threads(-1), ConfigError);
}
