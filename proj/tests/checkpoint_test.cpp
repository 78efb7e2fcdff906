#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "kfa/checkpoint.hpp"
#include "kfa/fit.hpp"
#include "synthetic.hpp"

using namespace kfa;
using kfa::testing::make_linear_problem;
using kfa::testing::random_normal;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

// Fitted state with a masked double-ARD ARD-RBF input, a primal input and
// a partially observed primal output.
ModelState fitted_state() {
  const auto p = make_linear_problem(40, 4, 2, 2, 20.0, 1);
  KernelConfig kc;
  kc.kind = KernelKind::kArdRbf;
  ViewSpec k{"k", ViewRole::kInput, Representation::kKernelized, kc, true, true};
  ViewSpec x{"x", ViewRole::kInput, Representation::kPrimal, std::nullopt, false, false};
  ViewSpec y{"y", ViewRole::kOutput, Representation::kPrimal, std::nullopt, false, false};
  std::vector<bool> mask(40, true);
  mask[3] = mask[17] = false;
  Hyperparams h;
  h.k_init = 6;
  FitConfig cfg;
  cfg.restarts = 1;
  cfg.max_iters = 150;
  cfg.prune_every = 5;
  cfg.rv_budget = 0.5;
  cfg.lambda_opt = LambdaOptConfig{};
  return fit({{k, {p.x, {}}}, {x, {p.x.leftCols(2), {}}}, {y, {p.y, mask}}}, h, cfg, 5);
}

void expect_same_state(const ModelState& a, const ModelState& b) {
  EXPECT_EQ(a.seed, b.seed);
  EXPECT_EQ(a.z.mean, b.z.mean);
  ASSERT_EQ(a.z.covs.size(), b.z.covs.size());
  for (size_t g = 0; g < a.z.covs.size(); ++g) EXPECT_EQ(a.z.covs[g], b.z.covs[g]);
  EXPECT_EQ(a.z.row_group, b.z.row_group);
  EXPECT_EQ(a.active_factors, b.active_factors);
  EXPECT_EQ(a.elbo_history, b.elbo_history);
  EXPECT_EQ(a.structural_events, b.structural_events);
  ASSERT_EQ(a.views.size(), b.views.size());
  for (size_t m = 0; m < a.views.size(); ++m) {
    const ViewState& u = a.views[m];
    const ViewState& v = b.views[m];
    EXPECT_EQ(u.spec.name, v.spec.name);
    EXPECT_EQ(u.spec.role, v.spec.role);
    EXPECT_EQ(u.spec.double_ard, v.spec.double_ard);
    EXPECT_EQ(u.target, v.target);
    EXPECT_EQ(u.observed, v.observed);
    EXPECT_EQ(u.dual.mean, v.dual.mean);
    EXPECT_EQ(u.alpha.b, v.alpha.b);
    EXPECT_EQ(u.tau.b, v.tau.b);
    EXPECT_EQ(u.gamma.b, v.gamma.b);
    EXPECT_EQ(u.active, v.active);
    EXPECT_EQ(u.kernel.lambda, v.kernel.lambda);
    EXPECT_EQ(u.tau_prior_rate, v.tau_prior_rate);
  }
}

}  // namespace

TEST(Checkpoint, RoundTripIsExact) {
  const ModelState s = fitted_state();
  ASSERT_LT(s.view("k").width(), 40) << "expected some RVs to be pruned";
  const std::string path = temp_path("kfa_roundtrip.kfa");
  nlohmann::json extra = {{"note", "demo"}, {"x_mean", {1.5, 2.5}}};
  save_checkpoint(path, s, extra, {{"scaler", Matrix::Constant(2, 3, 0.25)}});
  const Checkpoint ck = load_checkpoint(path);
  expect_same_state(s, ck.state);
  EXPECT_EQ(ck.extra, extra);
  EXPECT_EQ(ck.extra_arrays.at("scaler"), Matrix::Constant(2, 3, 0.25));
  EXPECT_EQ(compute_elbo(ck.state), compute_elbo(s));

  std::mt19937_64 rng(3);
  const Matrix new_x = random_normal(5, 4, rng);
  const std::map<std::string, Matrix> in = {{"k", new_x}, {"x", new_x.leftCols(2)}};
  EXPECT_EQ(predict(ck.state, in, "y"), predict(s, in, "y"));
  std::filesystem::remove(path);
}

TEST(Checkpoint, LoadedStateKeepsFitting) {
  ModelState s = fitted_state();
  const std::string path = temp_path("kfa_resume.kfa");
  save_checkpoint(path, s);
  ModelState t = load_checkpoint(path).state;
  for (int i = 0; i < 3; ++i) {
    sweep(s, LambdaOptConfig{});
    sweep(t, LambdaOptConfig{});
  }
  EXPECT_EQ(compute_elbo(s), compute_elbo(t));
  std::filesystem::remove(path);
}

TEST(Checkpoint, FileStartsWithMagicAndJsonHeader) {
  const std::string path = temp_path("kfa_layout.kfa");
  save_checkpoint(path, fitted_state());
  std::ifstream in(path, std::ios::binary);
  char magic[8];
  in.read(magic, 8);
  EXPECT_EQ(std::string(magic, 8), "KFACKPT1");
  std::uint64_t length = 0;
  in.read(reinterpret_cast<char*>(&length), 8);
  std::string header(length, '\0');
  in.read(header.data(), static_cast<std::streamsize>(length));
  const auto meta = nlohmann::json::parse(header);
  EXPECT_EQ(meta.at("format"), 1);
  EXPECT_EQ(meta.at("views").size(), 3u);
  EXPECT_TRUE(meta.contains("hyper"));
  std::filesystem::remove(path);
}

TEST(Checkpoint, Errors) {
  EXPECT_THROW(load_checkpoint(temp_path("kfa_does_not_exist.kfa")), CheckpointError);

  const std::string junk = temp_path("kfa_junk.kfa");
  std::ofstream(junk) << "not a checkpoint";
  EXPECT_THROW(load_checkpoint(junk), CheckpointError);

  const std::string good = temp_path("kfa_good.kfa");
  save_checkpoint(good, fitted_state());
  const auto size = std::filesystem::file_size(good);
  const std::string truncated = temp_path("kfa_truncated.kfa");
  std::filesystem::copy_file(good, truncated, std::filesystem::copy_options::overwrite_existing);
  std::filesystem::resize_file(truncated, size - 16);
  EXPECT_THROW(load_checkpoint(truncated), CheckpointError);

  std::filesystem::resize_file(truncated, 40);
  EXPECT_THROW(load_checkpoint(truncated), CheckpointError);

  EXPECT_THROW(save_checkpoint("/nonexistent/dir/x.kfa", fitted_state()), CheckpointError);
  for (const auto& p : {junk, good, truncated}) std::filesystem::remove(p);
}
