#ifndef KFA_CHECKPOINT_HPP
#define KFA_CHECKPOINT_HPP

// Binary checkpoint layout:
//   8 bytes   magic "KFACKPT1"
//   8 bytes   little-endian uint64 length L of the JSON header
//   L bytes   JSON header (metadata plus an "arrays" table of name/rows/cols)
//   payload   each array in table order, column-major little-endian f64

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "kfa/model.hpp"

namespace kfa {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using ArrayMap = std::map<std::string, Matrix>;

struct Checkpoint {
  ModelState state;
  nlohmann::json extra;
  ArrayMap extra_arrays;
};

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'K', 'F', 'A', 'C', 'K', 'P', 'T', '1'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

inline Matrix as_column(const Vector& v) { return v; }

inline Matrix index_column(const std::vector<Index>& idx) {
  Matrix out(static_cast<Index>(idx.size()), 1);
  for (size_t i = 0; i < idx.size(); ++i) out(static_cast<Index>(i), 0) = static_cast<double>(idx[i]);
  return out;
}

inline Matrix double_column(const std::vector<double>& values) {
  Matrix out(static_cast<Index>(values.size()), 1);
  for (size_t i = 0; i < values.size(); ++i) out(static_cast<Index>(i), 0) = values[i];
  return out;
}

inline nlohmann::json kernel_to_json(const KernelConfig& k) {
  return {{"kind", to_string(k.kind)},
          {"gamma", k.gamma},
          {"degree", k.degree},
          {"coef0", k.coef0},
          {"center", k.center}};
}

inline KernelConfig kernel_from_json(const nlohmann::json& j) {
  KernelConfig k;
  k.kind = kernel_kind_from_string(j.at("kind").get<std::string>());
  k.gamma = j.at("gamma").get<double>();
  k.degree = j.at("degree").get<int>();
  k.coef0 = j.at("coef0").get<double>();
  k.center = j.at("center").get<bool>();
  return k;
}

inline nlohmann::json hyper_to_json(const Hyperparams& h) {
  return {{"a_alpha", h.a_alpha},   {"b_alpha", h.b_alpha},
          {"a_tau", h.a_tau},       {"b_tau", h.b_tau},
          {"a_gamma", h.a_gamma},   {"b_gamma", h.b_gamma},
          {"k_init", h.k_init},     {"prune_factor_tol", h.prune_factor_tol},
          {"prune_rv_tol", h.prune_rv_tol}, {"noise_floor", h.noise_floor}};
}

inline Hyperparams hyper_from_json(const nlohmann::json& j) {
  Hyperparams h;
  h.a_alpha = j.at("a_alpha").get<double>();
  h.b_alpha = j.at("b_alpha").get<double>();
  h.a_tau = j.at("a_tau").get<double>();
  h.b_tau = j.at("b_tau").get<double>();
  h.a_gamma = j.at("a_gamma").get<double>();
  h.b_gamma = j.at("b_gamma").get<double>();
  h.k_init = j.at("k_init").get<int>();
  h.prune_factor_tol = j.at("prune_factor_tol").get<double>();
  h.prune_rv_tol = j.at("prune_rv_tol").get<double>();
  h.noise_floor = j.at("noise_floor").get<double>();
  return h;
}

inline std::vector<Index> to_indices(const Matrix& m) {
  std::vector<Index> out(static_cast<size_t>(m.size()));
  for (Index i = 0; i < m.size(); ++i) out[static_cast<size_t>(i)] = static_cast<Index>(m(i));
  return out;
}

inline std::vector<double> to_doubles(const Matrix& m) {
  return std::vector<double>(m.data(), m.data() + m.size());
}

inline Vector to_vector(const Matrix& m) {
  return Eigen::Map<const Vector>(m.data(), m.size());
}

inline std::vector<bool> to_mask(const Matrix& m) {
  std::vector<bool> out(static_cast<size_t>(m.size()));
  for (Index i = 0; i < m.size(); ++i) out[static_cast<size_t>(i)] = m(i) != 0.0;
  return out;
}

inline Matrix mask_column(const std::vector<bool>& mask) {
  Matrix out(static_cast<Index>(mask.size()), 1);
  for (size_t i = 0; i < mask.size(); ++i) out(static_cast<Index>(i), 0) = mask[i] ? 1.0 : 0.0;
  return out;
}

inline void write_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

}  // namespace detail

// Serializes a fitted state (plus caller metadata and arrays) to `path`.
inline void save_checkpoint(const std::string& path, const ModelState& s,
                            const nlohmann::json& extra = nlohmann::json::object(),
                            const ArrayMap& extra_arrays = {}) {
  using namespace detail;
  std::vector<std::pair<std::string, Matrix>> arrays;
  auto add = [&](const std::string& name, Matrix m) { arrays.emplace_back(name, std::move(m)); };

  nlohmann::json meta;
  meta["format"] = 1;
  meta["seed"] = s.seed;
  meta["hyper"] = hyper_to_json(s.hyper);
  add("z.mean", s.z.mean);
  for (size_t g = 0; g < s.z.covs.size(); ++g) add("z.cov." + std::to_string(g), s.z.covs[g]);
  add("active_factors", index_column(s.active_factors));
  add("elbo_history", double_column(s.elbo_history));
  add("structural_events", index_column(s.structural_events));

  nlohmann::json views = nlohmann::json::array();
  for (size_t m = 0; m < s.views.size(); ++m) {
    const ViewState& v = s.views[m];
    const std::string p = "view." + std::to_string(m) + ".";
    nlohmann::json jv;
    jv["name"] = v.spec.name;
    jv["role"] = to_string(v.spec.role);
    jv["representation"] = to_string(v.spec.representation);
    jv["double_ard"] = v.spec.double_ard;
    jv["learn_lambda"] = v.spec.learn_lambda;
    if (v.spec.kernelized()) jv["kernel"] = kernel_to_json(v.kernel);
    jv["tau_prior_rate"] = v.tau_prior_rate;
    jv["adam_t"] = v.lambda_adam.t;
    views.push_back(jv);

    add(p + "features", v.features);
    add(p + "observed", mask_column(v.observed));
    add(p + "target", v.target);
    add(p + "dual.mean", v.dual.mean);
    if (v.dual.cov_shared) {
      add(p + "dual.cov_shared", *v.dual.cov_shared);
    } else {
      add(p + "dual.row_basis", v.dual.row_basis);
      add(p + "dual.row_scales", v.dual.row_scales);
      add(p + "dual.row_log_det", as_column(v.dual.row_log_det));
    }
    add(p + "alpha.a", as_column(v.alpha.a));
    add(p + "alpha.b", as_column(v.alpha.b));
    add(p + "tau.a", as_column(v.tau.a));
    add(p + "tau.b", as_column(v.tau.b));
    if (v.spec.double_ard) {
      add(p + "gamma.a", as_column(v.gamma.a));
      add(p + "gamma.b", as_column(v.gamma.b));
    }
    if (v.spec.kernelized()) {
      add(p + "basis", index_column(v.basis));
      add(p + "active", index_column(v.active));
      add(p + "centering.row_means", as_column(v.centering.train_row_means));
      add(p + "centering.grand_mean", Matrix::Constant(1, 1, v.centering.train_grand_mean));
      if (v.kernel.lambda.size() > 0) add(p + "kernel.lambda", as_column(v.kernel.lambda));
      if (v.lambda_adam.m.size() > 0) {
        add(p + "adam.m", as_column(v.lambda_adam.m));
        add(p + "adam.v", as_column(v.lambda_adam.v));
      }
    }
  }
  meta["views"] = views;
  meta["extra"] = extra;
  for (const auto& [name, m] : extra_arrays) add("extra." + name, m);

  nlohmann::json table = nlohmann::json::array();
  for (const auto& [name, m] : arrays) table.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
  meta["arrays"] = table;
  const std::string header = meta.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot open '" + path + "' for writing");
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  write_u64(out, header.size());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& [name, m] : arrays) {
    out.write(reinterpret_cast<const char*>(m.data()),
              static_cast<std::streamsize>(m.size() * static_cast<Index>(sizeof(double))));
  }
  if (!out) throw CheckpointError("failed writing '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  using namespace detail;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open '" + path + "'");
  char magic[sizeof kCheckpointMagic];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw CheckpointError("'" + path + "' is not a checkpoint file");
  }
  const std::uint64_t length = read_u64(in);
  if (!in || length > (std::uint64_t{1} << 32)) throw CheckpointError("corrupt checkpoint header");
  std::string header(length, '\0');
  in.read(header.data(), static_cast<std::streamsize>(length));
  if (!in) throw CheckpointError("truncated checkpoint header");

  nlohmann::json meta;
  ArrayMap arrays;
  try {
    meta = nlohmann::json::parse(header);
    for (const auto& entry : meta.at("arrays")) {
      const Index rows = entry.at("rows").get<Index>();
      const Index cols = entry.at("cols").get<Index>();
      if (rows < 0 || cols < 0) throw CheckpointError("negative array shape");
      Matrix m(rows, cols);
      in.read(reinterpret_cast<char*>(m.data()),
              static_cast<std::streamsize>(m.size() * static_cast<Index>(sizeof(double))));
      if (!in) throw CheckpointError("truncated checkpoint payload");
      arrays.emplace(entry.at("name").get<std::string>(), std::move(m));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint metadata: ") + e.what());
  }

  auto get = [&](const std::string& name) -> const Matrix& {
    auto it = arrays.find(name);
    if (it == arrays.end()) throw CheckpointError("checkpoint lacks array '" + name + "'");
    return it->second;
  };

  Checkpoint ck;
  ModelState& s = ck.state;
  try {
    s.seed = meta.at("seed").get<std::uint64_t>();
    s.hyper = hyper_from_json(meta.at("hyper"));
    s.z.mean = get("z.mean");
    s.active_factors = to_indices(get("active_factors"));
    s.elbo_history = to_doubles(get("elbo_history"));
    s.structural_events = to_indices(get("structural_events"));

    const auto& views = meta.at("views");
    for (size_t m = 0; m < views.size(); ++m) {
      const auto& jv = views[m];
      const std::string p = "view." + std::to_string(m) + ".";
      ViewState v;
      v.spec.name = jv.at("name").get<std::string>();
      v.spec.role = jv.at("role").get<std::string>() == "input" ? ViewRole::kInput : ViewRole::kOutput;
      v.spec.representation = jv.at("representation").get<std::string>() == "kernelized"
                                   ? Representation::kKernelized
                                   : Representation::kPrimal;
      v.spec.double_ard = jv.at("double_ard").get<bool>();
      v.spec.learn_lambda = jv.at("learn_lambda").get<bool>();
      v.tau_prior_rate = jv.at("tau_prior_rate").get<double>();
      v.lambda_adam.t = jv.at("adam_t").get<int>();
      v.features = get(p + "features");
      v.observed = to_mask(get(p + "observed"));
      for (size_t i = 0; i < v.observed.size(); ++i) {
        if (v.observed[i]) v.observed_rows.push_back(static_cast<Index>(i));
      }
      v.target = get(p + "target");
      v.dual.mean = get(p + "dual.mean");
      if (arrays.count(p + "dual.cov_shared")) {
        v.dual.cov_shared = get(p + "dual.cov_shared");
      } else {
        v.dual.row_basis = get(p + "dual.row_basis");
        v.dual.row_scales = get(p + "dual.row_scales");
        v.dual.row_log_det = to_vector(get(p + "dual.row_log_det"));
      }
      v.alpha = {to_vector(get(p + "alpha.a")), to_vector(get(p + "alpha.b"))};
      v.tau = {to_vector(get(p + "tau.a")), to_vector(get(p + "tau.b"))};
      if (v.spec.double_ard) v.gamma = {to_vector(get(p + "gamma.a")), to_vector(get(p + "gamma.b"))};
      if (jv.contains("kernel")) {
        v.kernel = kernel_from_json(jv.at("kernel"));
        if (arrays.count(p + "kernel.lambda")) v.kernel.lambda = to_vector(get(p + "kernel.lambda"));
        v.spec.kernel = v.kernel;
        v.basis = to_indices(get(p + "basis"));
        v.active = to_indices(get(p + "active"));
        v.centering.train_row_means = to_vector(get(p + "centering.row_means"));
        v.centering.train_grand_mean = get(p + "centering.grand_mean")(0, 0);
        if (arrays.count(p + "adam.m")) {
          v.lambda_adam.m = to_vector(get(p + "adam.m"));
          v.lambda_adam.v = to_vector(get(p + "adam.v"));
        }
      }
      v.spec.validate();
      s.views.push_back(std::move(v));
    }
    s.groups = build_mask_groups(s.views, s.z.mean.rows(), s.z.row_group);
    for (size_t g = 0; g < s.groups.size(); ++g) s.z.covs.push_back(get("z.cov." + std::to_string(g)));
    ck.extra = meta.value("extra", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint metadata: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("invalid checkpoint contents: ") + e.what());
  }
  for (auto& [name, m] : arrays) {
    if (name.rfind("extra.", 0) == 0) ck.extra_arrays.emplace(name.substr(6), m);
  }
  return ck;
}

}  // namespace kfa

#endif  // KFA_CHECKPOINT_HPP
