// Copyright 2026 The FLoPS Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef FLOPS_EXPERIMENT_HPP
#define FLOPS_EXPERIMENT_HPP

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "flops/federation.hpp"
#include "flops/ingest.hpp"
#include "flops/log.hpp"
#include "flops/metrics.hpp"
#include "flops/partition.hpp"
#include "flops/synthdata.hpp"

#ifndef FLOPS_BUILD_ID
#define FLOPS_BUILD_ID "unknown"
#endif

namespace flops {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kTraceSchemaVersion = 1;
inline constexpr const char* kDataRootEnv = "FLOPS_DATA_ROOT";

/// Bad or inconsistent configuration, including missing input files.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class DatasetKind { Synthetic, Libsvm, Idx, Cache };

inline std::string to_string(DatasetKind k) {
  switch (k) {
    case DatasetKind::Synthetic: return "synthetic";
    case DatasetKind::Libsvm: return "libsvm";
    case DatasetKind::Idx: return "idx";
    case DatasetKind::Cache: return "cache";
  }
  return "?";
}

struct DatasetConfig {
  DatasetKind kind = DatasetKind::Synthetic;
  TaskKind task = TaskKind::linear();
  /// Class count for MC/MLC; kept for LR/LG so a grid can switch tasks.
  int classes = 5;
  // synthetic
  Eigen::Index n = 10000;
  Eigen::Index p = 1000;
  double rho_true = 0.05;
  double rho_cor = 0.2;
  double snr = 20.0;
  /// Held-out share when no separate test file is given.
  double test_fraction = 0.2;
  // files; relative paths resolve against $FLOPS_DATA_ROOT, else the config's directory
  std::string train_path;
  std::string test_path;
  std::string train_labels_path;
  std::string test_labels_path;
  bool zero_based = false;
  std::optional<Eigen::Index> dim;
  std::optional<int> top_labels;
  /// Real data only: append a constant-1 feature.
  bool add_bias = false;
};

struct PartitionConfig {
  int clients = 100;
  HeterogeneityConfig het;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "runs/experiment";
  DatasetConfig dataset;
  PartitionConfig partition;
  FederationConfig federation;
  json grid = json::object();
  /// Anchor for relative data paths when the environment variable is unset.
  fs::path base_dir = ".";
};

namespace config_detail {

/// Typed access to one JSON object that rejects keys it was never asked about.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + " must be an object");
  }

  template <class T>
  T get(const std::string& key, T fallback) {
    seen_.insert(key);
    if (!j_.contains(key) || j_.at(key).is_null()) return fallback;
    return convert<T>(key);
  }

  template <class T>
  std::optional<T> optional(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key) || j_.at(key).is_null()) return std::nullopt;
    return convert<T>(key);
  }

  bool has(const std::string& key) const { return j_.contains(key) && !j_.at(key).is_null(); }

  Section child(const std::string& key) {
    seen_.insert(key);
    static const json empty = json::object();
    return Section(j_.contains(key) ? j_.at(key) : empty, path_ + "." + key);
  }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("unknown key " + path_ + "." + k);
  }

  const std::string& path() const { return path_; }

 private:
  template <class T>
  T convert(const std::string& key) {
    const json& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError("");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ConfigError("");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError("");
      }
      return v.get<T>();
    } catch (const std::exception&) {
      throw ConfigError(path_ + "." + key + " has the wrong type (got " + v.dump() + ")");
    }
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <class F>
auto wrap(const std::string& where, F&& f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

inline ScaleMode scale_mode_from_string(const std::string& s) {
  if (s == "sign_aware") return ScaleMode::SignAware;
  if (s == "literal") return ScaleMode::Literal;
  throw ConfigError("scale_mode must be 'sign_aware' or 'literal'");
}

inline std::string to_string(ScaleMode m) { return m == ScaleMode::SignAware ? "sign_aware" : "literal"; }

inline Weighting weighting_from_string(const std::string& s) {
  if (s == "uniform") return Weighting::Uniform;
  if (s == "samples") return Weighting::Samples;
  throw ConfigError("weighting must be 'uniform' or 'samples'");
}

inline std::string to_string(Weighting w) { return w == Weighting::Uniform ? "uniform" : "samples"; }

inline DatasetKind dataset_kind_from_string(const std::string& s) {
  if (s == "synthetic") return DatasetKind::Synthetic;
  if (s == "libsvm") return DatasetKind::Libsvm;
  if (s == "idx") return DatasetKind::Idx;
  if (s == "cache") return DatasetKind::Cache;
  throw ConfigError("dataset.kind must be synthetic, libsvm, idx or cache");
}

inline TaskKind task_from(const std::string& name, int outputs) {
  switch (task_type_from_string(name)) {
    case TaskType::LinearRegression: return TaskKind::linear();
    case TaskType::LogisticRegression: return TaskKind::logistic();
    case TaskType::MultiClass: return TaskKind::multiclass(outputs);
    case TaskType::MultiLabel: return TaskKind::multilabel(outputs);
  }
  return TaskKind::linear();
}

}  // namespace config_detail

/// Resolves a data path: absolute paths as given, relative ones under
/// $FLOPS_DATA_ROOT when set, else under the config's directory.
inline fs::path resolve_data_path(const std::string& p, const fs::path& base_dir) {
  const fs::path path(p);
  if (path.is_absolute()) return path;
  if (const char* root = std::getenv(kDataRootEnv); root && *root) return fs::path(root) / path;
  return base_dir / path;
}

inline ExperimentConfig parse_config(const json& root, const fs::path& base_dir = ".") {
  using namespace config_detail;
  ExperimentConfig cfg;
  cfg.base_dir = base_dir;
  Section top(root, "config");
  cfg.seed = top.get<std::uint64_t>("seed", 0);
  cfg.output_dir = top.get<std::string>("output_dir", cfg.output_dir);
  if (top.has("grid")) {
    cfg.grid = top.raw("grid");
    if (!cfg.grid.is_object()) throw ConfigError("config.grid must be an object");
  }

  {
    Section d = top.child("dataset");
    auto& dc = cfg.dataset;
    dc.kind = dataset_kind_from_string(d.get<std::string>("kind", "synthetic"));
    const std::string task = d.get<std::string>("task", "LR");
    dc.classes = d.get<int>("classes", dc.classes);
    dc.n = d.get<Eigen::Index>("n", dc.n);
    dc.p = d.get<Eigen::Index>("p", dc.p);
    dc.rho_true = d.get<double>("rho_true", dc.rho_true);
    dc.rho_cor = d.get<double>("rho_cor", dc.rho_cor);
    dc.snr = d.get<double>("snr", dc.snr);
    dc.test_fraction = d.get<double>("test_fraction", dc.test_fraction);
    dc.train_path = d.get<std::string>("train_path", "");
    dc.test_path = d.get<std::string>("test_path", "");
    dc.train_labels_path = d.get<std::string>("train_labels_path", "");
    dc.test_labels_path = d.get<std::string>("test_labels_path", "");
    dc.zero_based = d.get<bool>("zero_based", false);
    dc.dim = d.optional<Eigen::Index>("dim");
    dc.top_labels = d.optional<int>("top_labels");
    dc.add_bias = d.get<bool>("add_bias", false);
    d.finish();
    dc.task = wrap("dataset", [&] {
      auto t = task_from(task, dc.top_labels && task == "MLC" ? *dc.top_labels : dc.classes);
      t.validate();
      return t;
    });
    if (!(dc.test_fraction > 0.0 && dc.test_fraction < 1.0)) throw ConfigError("dataset.test_fraction must lie in (0, 1)");
    if (dc.kind == DatasetKind::Synthetic) {
      SynthSpec s{dc.n, dc.p, dc.rho_true, dc.rho_cor, dc.snr, dc.task, 0};
      wrap("dataset", [&] { s.validate(); return 0; });
      if (dc.n < 2) throw ConfigError("dataset.n must be at least 2");
    } else {
      if (dc.train_path.empty()) throw ConfigError("dataset.train_path is required for " + to_string(dc.kind) + " data");
      if (dc.kind == DatasetKind::Idx && dc.train_labels_path.empty())
        throw ConfigError("dataset.train_labels_path is required for idx data");
      if (dc.kind == DatasetKind::Idx && !dc.test_path.empty() && dc.test_labels_path.empty())
        throw ConfigError("dataset.test_labels_path is required with an idx test_path");
      if (dc.task.type == TaskType::LinearRegression && dc.kind == DatasetKind::Idx)
        throw ConfigError("idx data carries class labels; use task MC");
      if (dc.top_labels && dc.task.type != TaskType::MultiLabel) throw ConfigError("dataset.top_labels applies to MLC only");
      if (dc.dim && *dc.dim < 1) throw ConfigError("dataset.dim must be positive");
    }
    if (dc.add_bias && dc.kind == DatasetKind::Synthetic) throw ConfigError("dataset.add_bias applies to real data only");
  }

  {
    Section p = top.child("partition");
    auto& pc = cfg.partition;
    pc.clients = p.get<int>("clients", pc.clients);
    pc.het.mode = wrap("partition", [&] { return partition_mode_from_string(p.get<std::string>("mode", "quantity_skew")); });
    pc.het.alpha_iid = p.get<double>("alpha_iid", pc.het.alpha_iid);
    pc.het.sigma_ms = p.optional<double>("sigma_ms");
    pc.het.participation = p.get<double>("participation", pc.het.participation);
    pc.het.clusters = p.get<int>("clusters", pc.het.clusters);
    pc.het.parts_per_cluster = p.get<int>("parts_per_cluster", pc.het.parts_per_cluster);
    p.finish();
    if (pc.clients < 1) throw ConfigError("partition.clients must be >= 1");
    wrap("partition", [&] { pc.het.validate(); return 0; });
    if (std::floor(pc.het.participation * pc.clients + 1e-9) < 1)
      throw ConfigError("partition.participation * clients selects no client");
    if (pc.het.mode == PartitionMode::ClusterSplit && pc.het.clusters * pc.het.parts_per_cluster != 2 * pc.clients)
      throw ConfigError("cluster_split needs clusters * parts_per_cluster == 2 * clients");
    if (pc.het.mode == PartitionMode::LabelSkew && cfg.dataset.task.type != TaskType::MultiClass &&
        cfg.dataset.task.type != TaskType::LogisticRegression)
      throw ConfigError("label_skew needs class labels (LG or MC)");
  }

  {
    Section a = top.child("algorithm");
    auto& f = cfg.federation;
    f.algorithm = wrap("algorithm", [&] { return algorithm_from_string(a.get<std::string>("name", "FLoPS")); });
    f.epochs = a.get<int>("epochs", f.epochs);
    f.batch_size = a.get<int>("batch_size", f.batch_size);
    f.steps_per_epoch = a.get<int>("steps_per_epoch", f.steps_per_epoch);
    f.eta_theta = a.get<double>("eta_theta", f.eta_theta);
    f.eta_phi = a.get<double>("eta_phi", f.eta_phi);
    f.eta_lambda = a.optional<double>("eta_lambda");
    f.rho_targ = a.get<double>("rho_targ", f.rho_targ);
    f.rho_init = a.get<double>("rho_init", f.rho_init);
    f.init_sigma = a.get<double>("init_sigma", f.init_sigma);
    f.theta_init_std = a.get<double>("theta_init_std", f.theta_init_std);
    f.prune_start = a.optional<int>("prune_start");
    f.decay_r = a.get<double>("decay_r", f.decay_r);
    f.scale_mode = scale_mode_from_string(a.get<std::string>("scale_mode", "sign_aware"));
    f.mc_samples = a.get<int>("mc_samples", f.mc_samples);
    if (auto w = a.optional<std::string>("weighting")) f.weighting = weighting_from_string(*w);
    f.keep_history = a.get<bool>("keep_history", f.keep_history);
    {
      Section g = a.child("gate");
      f.hyper.gamma = g.get<double>("gamma", f.hyper.gamma);
      f.hyper.zeta = g.get<double>("zeta", f.hyper.zeta);
      f.hyper.beta_prime = g.get<double>("beta_prime", f.hyper.beta_prime);
      g.finish();
    }
    {
      Section t = a.child("server_tune");
      f.tune.enabled = t.get<bool>("enabled", f.tune.enabled);
      f.tune.fraction = t.get<double>("fraction", f.tune.fraction);
      f.tune.steps = t.get<int>("steps", f.tune.steps);
      f.tune.eta_theta = t.get<double>("eta_theta", f.tune.eta_theta);
      f.tune.eta_phi = t.get<double>("eta_phi", f.tune.eta_phi);
      t.finish();
    }
    a.finish();
    f.participation = cfg.partition.het.participation;
    wrap("algorithm", [&] { f.validate(); return 0; });
    if (f.prune_start && *f.prune_start < 0) throw ConfigError("algorithm.prune_start must be >= 0");
    if (f.tune.enabled && !is_gated(f.algorithm)) throw ConfigError("server_tune applies to FLoPS and FLoPS-PA only");
  }
  top.finish();

  // files must exist before anything is written
  if (cfg.dataset.kind != DatasetKind::Synthetic) {
    for (const auto* p : {&cfg.dataset.train_path, &cfg.dataset.test_path, &cfg.dataset.train_labels_path,
                          &cfg.dataset.test_labels_path}) {
      if (p->empty()) continue;
      const auto full = resolve_data_path(*p, base_dir);
      if (!fs::exists(full)) throw ConfigError("dataset file not found: " + full.string());
    }
  }
  return cfg;
}

/// The configuration with every default filled in; parsing it yields the same run.
inline json to_json(const ExperimentConfig& c) {
  using config_detail::to_string;
  const auto& d = c.dataset;
  const bool multi = d.task.type == TaskType::MultiClass || d.task.type == TaskType::MultiLabel;
  json ds = {{"kind", flops::to_string(d.kind)}, {"task", flops::to_string(d.task.type)},
             {"classes", multi ? d.task.outputs : d.classes},
             {"test_fraction", d.test_fraction}};
  if (d.kind == DatasetKind::Synthetic) {
    ds.update({{"n", d.n}, {"p", d.p}, {"rho_true", d.rho_true}, {"rho_cor", d.rho_cor}, {"snr", d.snr}});
  } else {
    ds.update({{"train_path", d.train_path}, {"test_path", d.test_path}, {"train_labels_path", d.train_labels_path},
               {"test_labels_path", d.test_labels_path}, {"zero_based", d.zero_based},
               {"dim", d.dim ? json(*d.dim) : json(nullptr)},
               {"top_labels", d.top_labels ? json(*d.top_labels) : json(nullptr)}, {"add_bias", d.add_bias}});
  }
  const auto& h = c.partition.het;
  json part = {{"clients", c.partition.clients}, {"mode", flops::to_string(h.mode)}, {"alpha_iid", h.alpha_iid},
               {"sigma_ms", h.sigma_ms ? json(*h.sigma_ms) : json(nullptr)}, {"participation", h.participation},
               {"clusters", h.clusters}, {"parts_per_cluster", h.parts_per_cluster}};
  const auto& f = c.federation;
  json alg = {{"name", flops::to_string(f.algorithm)},
              {"epochs", f.epochs},
              {"batch_size", f.batch_size},
              {"steps_per_epoch", f.steps_per_epoch},
              {"eta_theta", f.eta_theta},
              {"eta_phi", f.eta_phi},
              {"eta_lambda", f.eta_lambda ? json(*f.eta_lambda) : json(nullptr)},
              {"rho_targ", f.rho_targ},
              {"rho_init", f.rho_init},
              {"init_sigma", f.init_sigma},
              {"theta_init_std", f.theta_init_std},
              {"prune_start", f.resolved_prune_start()},
              {"decay_r", f.decay_r},
              {"scale_mode", to_string(f.scale_mode)},
              {"mc_samples", f.mc_samples},
              {"weighting", to_string(f.resolved_weighting())},
              {"keep_history", f.keep_history},
              {"gate", {{"gamma", f.hyper.gamma}, {"zeta", f.hyper.zeta}, {"beta_prime", f.hyper.beta_prime}}},
              {"server_tune",
               {{"enabled", f.tune.enabled},
                {"fraction", f.tune.fraction},
                {"steps", f.tune.steps},
                {"eta_theta", f.tune.eta_theta},
                {"eta_phi", f.tune.eta_phi}}}};
  return {{"seed", c.seed}, {"output_dir", c.output_dir}, {"dataset", ds}, {"partition", part}, {"algorithm", alg}};
}

inline json load_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return json::parse(ss.str(), nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline ExperimentConfig load_config(const fs::path& path) {
  return parse_config(load_json_file(path), path.has_parent_path() ? path.parent_path() : fs::path("."));
}

/// Everything a run needs besides the algorithm settings.
struct PreparedData {
  Dataset train;
  Dataset test;
  std::optional<Dataset> tune;
  Support truth;  ///< empty for real data
  std::vector<ClientShard> shards;
  double retained_label_fraction = std::numeric_limits<double>::quiet_NaN();
  double noise_sigma = std::numeric_limits<double>::quiet_NaN();
};

namespace experiment_detail {

inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_rows(Eigen::Index n, double fraction, Rng& rng) {
  auto perm = partition_detail::shuffled_range(static_cast<std::size_t>(n), rng);
  const auto n_hold = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n))));
  if (n_hold >= perm.size()) throw ConfigError("split leaves no training rows");
  std::vector<std::size_t> keep(perm.begin(), perm.end() - static_cast<std::ptrdiff_t>(n_hold));
  std::vector<std::size_t> hold(perm.end() - static_cast<std::ptrdiff_t>(n_hold), perm.end());
  std::sort(keep.begin(), keep.end());
  std::sort(hold.begin(), hold.end());
  return {keep, hold};
}

inline LibsvmData load_labeled(const ExperimentConfig& cfg, const std::string& path, const std::string& labels_path,
                               std::optional<Eigen::Index> dim) {
  const auto& d = cfg.dataset;
  const auto full = resolve_data_path(path, cfg.base_dir).string();
  switch (d.kind) {
    case DatasetKind::Libsvm: {
      LibsvmOptions o{d.zero_based, dim, d.task.type == TaskType::MultiLabel};
      return read_libsvm(full, o);
    }
    case DatasetKind::Idx: return {read_idx(full, resolve_data_path(labels_path, cfg.base_dir).string()), {}};
    case DatasetKind::Cache: return read_cache(full);
    case DatasetKind::Synthetic: break;
  }
  throw std::logic_error("load_labeled on synthetic data");
}

/// Re-expresses multi-label columns in the given vocabulary order; unknown labels are dropped.
inline void align_labels(LibsvmData& d, const std::vector<long>& vocab) {
  std::map<long, Eigen::Index> col;
  for (std::size_t k = 0; k < d.vocabulary.size(); ++k) col[d.vocabulary[k]] = static_cast<Eigen::Index>(k);
  Eigen::MatrixXd Y = Eigen::MatrixXd::Zero(d.data.rows(), static_cast<Eigen::Index>(vocab.size()));
  for (std::size_t k = 0; k < vocab.size(); ++k)
    if (auto it = col.find(vocab[k]); it != col.end()) Y.col(static_cast<Eigen::Index>(k)) = d.data.Y.col(it->second);
  d.data.Y = std::move(Y);
  d.vocabulary = vocab;
}

}  // namespace experiment_detail

/// Builds train/test/tune sets and client shards. Every random choice derives from cfg.seed.
inline PreparedData prepare_data(const ExperimentConfig& cfg) {
  using namespace experiment_detail;
  const Rng root(cfg.seed);
  const auto& d = cfg.dataset;
  PreparedData out;
  Dataset pool;
  if (d.kind == DatasetKind::Synthetic) {
    SynthSpec s{d.n, d.p, d.rho_true, d.rho_cor, d.snr, d.task, root.fork(1).seed()};
    auto sd = make_synthetic(s);
    out.truth = sd.truth.support;
    out.noise_sigma = sd.sigma;
    Rng split_rng = root.fork(2);
    auto [train_idx, test_idx] = split_rows(sd.data.rows(), d.test_fraction, split_rng);
    out.train = sd.data.subset(train_idx);
    out.test = sd.data.subset(test_idx);
  } else {
    LibsvmData train = load_labeled(cfg, d.train_path, d.train_labels_path, d.dim);
    if (d.task.type == TaskType::MultiLabel) {
      const auto k = static_cast<std::size_t>(d.top_labels.value_or(static_cast<int>(train.vocabulary.size())));
      auto sel = select_top_labels(train, k);
      out.retained_label_fraction = sel.retained_fraction;
      log::info("kept " + std::to_string(k) + " labels covering " + std::to_string(sel.retained_fraction) +
                " of label assignments; dropped " + std::to_string(sel.dropped_rows) + " rows");
      train = std::move(sel.data);
      if (train.data.Y.cols() != d.task.outputs)
        throw ConfigError("MLC label count " + std::to_string(train.data.Y.cols()) + " differs from dataset.classes");
    }
    if (!d.test_path.empty()) {
      LibsvmData test = load_labeled(cfg, d.test_path, d.test_labels_path, train.data.dim());
      if (d.task.type == TaskType::MultiLabel) align_labels(test, train.vocabulary);
      if (test.data.dim() != train.data.dim()) throw ConfigError("train and test feature dimensions differ");
      out.train = std::move(train.data);
      out.test = std::move(test.data);
    } else {
      Rng split_rng = root.fork(2);
      auto [train_idx, test_idx] = split_rows(train.data.rows(), d.test_fraction, split_rng);
      out.test = train.data.subset(test_idx);
      out.train = train.data.subset(train_idx);
    }
    validate_labels(out.train, d.task);
    validate_labels(out.test, d.task);
    if (d.add_bias) {
      out.train.append_bias();
      out.test.append_bias();
    }
  }

  if (cfg.federation.tune.enabled) {
    Rng tune_rng = root.fork(3);
    auto [keep, hold] = split_rows(out.train.rows(), cfg.federation.tune.fraction, tune_rng);
    out.tune = out.train.subset(hold);
    out.train = out.train.subset(keep);
  }

  const auto& h = cfg.partition.het;
  const int C = cfg.partition.clients;
  if (out.train.rows() < C) throw ConfigError("fewer training rows than clients");
  Rng part_rng = root.fork(4);
  switch (h.mode) {
    case PartitionMode::Iid: out.shards = make_shards(out.train, iid_assignment(static_cast<std::size_t>(out.train.rows()), C, part_rng)); break;
    case PartitionMode::QuantitySkew: out.shards = dirichlet_quantity_split(out.train, C, h.alpha_iid, part_rng); break;
    case PartitionMode::LabelSkew: out.shards = dirichlet_label_split(out.train, C, h.alpha_iid, part_rng); break;
    case PartitionMode::ClusterSplit:
      out.shards = cluster_split_rcv1(out.train, h.clusters, h.parts_per_cluster, C, part_rng);
      break;
  }
  if (h.sigma_ms && *h.sigma_ms > 0.0) {
    Rng shift_rng = root.fork(5);
    out.shards = affine_shift(std::move(out.shards), *h.sigma_ms, shift_rng);
  }
  return out;
}

struct RunResult {
  ExperimentConfig config;
  TrainingTrace trace;
  PreparedData data;
};

/// Trains as configured without touching the filesystem (beyond reading data).
inline RunResult execute(const ExperimentConfig& cfg) {
  RunResult r;
  r.config = cfg;
  r.data = prepare_data(cfg);
  FederationConfig f = cfg.federation;
  f.seed = Rng(cfg.seed).fork(6).seed();
  const Eigen::Index size = SparseModel::parameter_count(cfg.dataset.task, r.data.train.dim());
  if (f.keep_history && size * f.epochs > 50'000'000) {
    log::warn("gate history would exceed 50M entries; IOU matrices are skipped");
    f.keep_history = false;
  }
  EvalContext ctx{&r.data.test, r.data.truth.empty() ? nullptr : &r.data.truth, r.data.tune ? &*r.data.tune : nullptr};
  r.trace = run_federation(f, r.data.shards, cfg.dataset.task, r.data.train.dim(), ctx);
  return r;
}

namespace experiment_detail {

inline std::string fmt(double v) {
  if (std::isnan(v)) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

inline std::string matrix_csv(const Eigen::MatrixXd& M) {
  std::ostringstream s;
  for (Eigen::Index i = 0; i < M.rows(); ++i) {
    for (Eigen::Index j = 0; j < M.cols(); ++j) s << (j ? "," : "") << fmt(M(i, j));
    s << '\n';
  }
  return s.str();
}

}  // namespace experiment_detail

inline const std::vector<std::string>& trace_columns() {
  static const std::vector<std::string> cols = {
      "epoch",          "train_loss",          "test_score",         "test_loss",          "expected_density",
      "active_gates",   "nonzeros",            "tdr",                "tdr_topm",           "lambda",
      "constraint",     "uplink_value_bytes",  "uplink_index_bytes", "downlink_value_bytes", "downlink_index_bytes",
      "total_uplink_bytes", "total_downlink_bytes", "rounds"};
  return cols;
}

/// trace.csv: a schema-version comment, a header row, one row per epoch.
inline std::string trace_csv(const TrainingTrace& t) {
  using experiment_detail::fmt;
  std::ostringstream s;
  s << "# schema_version: " << kTraceSchemaVersion << '\n';
  const auto& cols = trace_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) s << (i ? "," : "") << cols[i];
  s << '\n';
  for (const auto& e : t.epochs) {
    const auto& l = e.ledger;
    s << e.epoch << ',' << fmt(e.train_loss) << ',' << fmt(e.test.score) << ',' << fmt(e.test.loss) << ','
      << fmt(e.expected_density) << ',' << e.active_gates << ',' << e.nonzeros << ',' << fmt(e.tdr) << ','
      << fmt(e.tdr_topm) << ',' << fmt(e.lambda) << ',' << fmt(e.constraint) << ',' << l.uplink_value_bytes << ','
      << l.uplink_index_bytes << ',' << l.downlink_value_bytes << ',' << l.downlink_index_bytes << ','
      << l.total_uplink_bytes << ',' << l.total_downlink_bytes << ',' << l.rounds << '\n';
  }
  return s.str();
}

inline json partition_manifest(const PreparedData& d, const ExperimentConfig& cfg) {
  json clients = json::array();
  for (const auto& s : d.shards) clients.push_back({{"client_id", s.client_id}, {"n", s.n()}, {"rows", s.indices}});
  return {{"mode", to_string(cfg.partition.het.mode)},
          {"clients", cfg.partition.clients},
          {"train_rows", d.train.rows()},
          {"test_rows", d.test.rows()},
          {"tune_rows", d.tune ? d.tune->rows() : 0},
          {"shards", clients}};
}

inline std::string report_text(const RunResult& r) {
  using experiment_detail::fmt;
  const auto& t = r.trace;
  std::ostringstream s;
  s << "build: " << FLOPS_BUILD_ID << '\n';
  s << "algorithm: " << to_string(t.algorithm) << '\n';
  s << "task: " << to_string(t.task.type) << " (outputs " << t.task.outputs << ")\n";
  s << "epochs: " << t.epochs.size() << ", local steps per epoch: " << t.steps_per_epoch << '\n';
  s << "clients: " << r.data.shards.size() << ", train rows: " << r.data.train.rows() << ", test rows: " << r.data.test.rows()
    << '\n';
  if (!std::isnan(r.data.retained_label_fraction)) s << "retained label assignments: " << fmt(r.data.retained_label_fraction) << '\n';
  if (!std::isnan(r.data.noise_sigma)) s << "synthetic noise sigma: " << fmt(r.data.noise_sigma) << '\n';
  if (!t.epochs.empty()) {
    const auto& e = t.epochs.back();
    const char* score = t.task.type == TaskType::LinearRegression ? "R2" : t.task.type == TaskType::MultiLabel ? "micro-F1" : "accuracy";
    const char* loss = t.task.type == TaskType::LinearRegression ? "MSE" : "CE";
    s << "\nfinal epoch " << e.epoch << '\n';
    s << "  test " << score << ": " << fmt(e.test.score) << '\n';
    s << "  test " << loss << ": " << fmt(e.test.loss) << '\n';
    s << "  train loss: " << fmt(e.train_loss) << '\n';
    s << "  expected density: " << fmt(e.expected_density) << '\n';
    s << "  active gates: " << e.active_gates << ", nonzero weights: " << e.nonzeros << '\n';
    if (e.tdr) s << "  TDR: " << fmt(e.tdr) << ", TDR(top-m): " << fmt(e.tdr_topm) << '\n';
    if (is_gated(t.algorithm)) s << "  lambda: " << fmt(e.lambda) << '\n';
  }
  const auto& l = t.ledger;
  s << "\ncommunication (one client link)\n";
  s << "  uplink value bytes: " << l.uplink_value_bytes << ", index bytes: " << l.uplink_index_bytes << '\n';
  s << "  downlink value bytes: " << l.downlink_value_bytes << ", index bytes: " << l.downlink_index_bytes << '\n';
  s << "communication (all participants)\n";
  s << "  uplink bytes: " << l.total_uplink_bytes << ", downlink bytes: " << l.total_downlink_bytes << ", rounds: " << l.rounds << '\n';
  s << "\nconfig\n" << to_json(r.config).dump(2) << '\n';
  return s.str();
}

/// Writes every output file of a finished run into `dir`.
inline void write_outputs(const RunResult& r, const fs::path& dir) {
  using experiment_detail::write_text;
  fs::create_directories(dir);
  write_text(dir / "resolved_config.json", to_json(r.config).dump(2) + "\n");
  write_text(dir / "trace.csv", trace_csv(r.trace));
  write_text(dir / "report.txt", report_text(r));
  write_text(dir / "partition.json", partition_manifest(r.data, r.config).dump() + "\n");
  if (r.trace.gate_history.size() >= 2)
    write_text(dir / "soft_iou.csv", experiment_detail::matrix_csv(soft_iou_matrix(r.trace.gate_history)));
  if (r.trace.mask_history.size() >= 2)
    write_text(dir / "mask_iou.csv", experiment_detail::matrix_csv(mask_iou_matrix(r.trace.mask_history)));
}

enum ExitCode : int { kExitOk = 0, kExitRuntime = 1, kExitConfig = 2 };

/// Runs one configuration. Outputs appear only after training succeeds.
inline int run_experiment(const ExperimentConfig& cfg) {
  try {
    auto r = execute(cfg);
    write_outputs(r, cfg.output_dir);
    log::info("wrote " + cfg.output_dir);
    return kExitOk;
  } catch (const ConfigError& e) {
    log::warn(std::string("config error: ") + e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    log::warn(std::string("run failed: ") + e.what());
    return kExitRuntime;
  }
}

/// Sweep axes in the order they vary (last fastest).
inline const std::vector<std::string>& grid_axes() {
  static const std::vector<std::string> axes = {"task", "algorithm", "snr", "rho_cor", "rho_targ", "alpha_iid", "seed"};
  return axes;
}

struct SweepCell {
  std::string name;
  json values = json::object();
  ExperimentConfig config;
};

/// Cartesian product of the grid block; an empty grid gives the base config alone.
inline std::vector<SweepCell> expand_grid(const ExperimentConfig& base) {
  for (const auto& [k, v] : base.grid.items()) {
    if (std::find(grid_axes().begin(), grid_axes().end(), k) == grid_axes().end())
      throw ConfigError("unknown grid axis '" + k + "'");
    if (!v.is_array() || v.empty()) throw ConfigError("grid." + k + " must be a non-empty list");
  }
  std::vector<std::pair<std::string, json>> axes;
  for (const auto& a : grid_axes())
    if (base.grid.contains(a)) axes.emplace_back(a, base.grid.at(a));

  json resolved = to_json(base);
  std::vector<SweepCell> cells;
  std::vector<std::size_t> pos(axes.size(), 0);
  while (true) {
    SweepCell cell;
    json j = resolved;
    std::ostringstream name;
    name << "cell_" << std::setw(4) << std::setfill('0') << cells.size();
    for (std::size_t a = 0; a < axes.size(); ++a) {
      const auto& [axis, vals] = axes[a];
      const json& v = vals[pos[a]];
      cell.values[axis] = v;
      if (axis == "task") {
        j["dataset"]["task"] = v;
      } else if (axis == "algorithm") {
        j["algorithm"]["name"] = v;
        // defaults that depend on the algorithm are re-derived for each cell
        if (!base.federation.prune_start) j["algorithm"]["prune_start"] = nullptr;
        if (!base.federation.weighting) j["algorithm"]["weighting"] = nullptr;
      } else if (axis == "snr" || axis == "rho_cor") {
        j["dataset"][axis] = v;
      } else if (axis == "rho_targ") {
        j["algorithm"]["rho_targ"] = v;
      } else if (axis == "alpha_iid") {
        j["partition"]["alpha_iid"] = v;
      } else if (axis == "seed") {
        j["seed"] = v;
      }
      std::string sv = v.is_string() ? v.get<std::string>() : v.dump();
      name << '_' << axis << '=' << sv;
    }
    cell.name = name.str();
    const fs::path out = fs::path(base.output_dir) / cell.name;
    j["output_dir"] = out.string();
    cell.config = config_detail::wrap("grid cell " + cell.name, [&] { return parse_config(j, base.base_dir); });
    cells.push_back(std::move(cell));

    std::size_t a = axes.size();
    while (a > 0) {
      --a;
      if (++pos[a] < axes[a].second.size()) break;
      pos[a] = 0;
      if (a == 0) return cells;
    }
    if (axes.empty()) return cells;
  }
}

struct CellOutcome {
  int status = kExitOk;
  std::string error;
  std::optional<RunResult> result;
};

/// Runs every cell with up to `jobs` worker threads and writes summary.csv and
/// aggregate.csv (per-epoch mean and standard deviation across seeds).
inline int run_sweep(const ExperimentConfig& base, int jobs) {
  std::vector<SweepCell> cells;
  try {
    cells = expand_grid(base);
  } catch (const ConfigError& e) {
    log::warn(std::string("config error: ") + e.what());
    return kExitConfig;
  }
  jobs = std::max(1, jobs);
  std::vector<CellOutcome> outcomes(cells.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      auto& o = outcomes[i];
      try {
        auto r = execute(cells[i].config);
        write_outputs(r, cells[i].config.output_dir);
        // the full result is only needed for the summaries
        r.data = PreparedData{};
        r.trace.gate_history.clear();
        r.trace.mask_history.clear();
        o.result = std::move(r);
      } catch (const ConfigError& e) {
        o.status = kExitConfig;
        o.error = e.what();
      } catch (const std::exception& e) {
        o.status = kExitRuntime;
        o.error = e.what();
      }
      if (o.status != kExitOk) log::warn(cells[i].name + " failed: " + o.error);
    }
  };
  std::vector<std::thread> pool;
  for (int t = 1; t < std::min<int>(jobs, static_cast<int>(cells.size())); ++t) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();

  using experiment_detail::fmt;
  std::vector<std::string> axes;
  for (const auto& a : grid_axes())
    if (base.grid.contains(a)) axes.push_back(a);
  auto axis_value = [](const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); };

  std::ostringstream summary;
  summary << "cell";
  for (const auto& a : axes) summary << ',' << a;
  summary << ",status,error,test_score,test_loss,tdr,tdr_topm,expected_density,active_gates,nonzeros,"
             "uplink_value_bytes,downlink_value_bytes,total_uplink_bytes,total_downlink_bytes\n";
  int failed = 0;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    summary << cells[i].name;
    for (const auto& a : axes) summary << ',' << axis_value(cells[i].values[a]);
    const auto& o = outcomes[i];
    if (o.status != kExitOk || !o.result || o.result->trace.epochs.empty()) {
      ++failed;
      std::string err = o.error;
      std::replace(err.begin(), err.end(), ',', ';');
      std::replace(err.begin(), err.end(), '\n', ' ');
      summary << ",failed," << err << ",,,,,,,,,,,\n";
      continue;
    }
    const auto& e = o.result->trace.epochs.back();
    const auto& l = o.result->trace.ledger;
    summary << ",ok,," << fmt(e.test.score) << ',' << fmt(e.test.loss) << ',' << fmt(e.tdr) << ',' << fmt(e.tdr_topm) << ','
            << fmt(e.expected_density) << ',' << e.active_gates << ',' << e.nonzeros << ',' << l.uplink_value_bytes << ','
            << l.downlink_value_bytes << ',' << l.total_uplink_bytes << ',' << l.total_downlink_bytes << '\n';
  }

  // group cells that differ only in seed
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (outcomes[i].status != kExitOk) continue;
    std::string key;
    for (const auto& a : axes)
      if (a != "seed") key += (key.empty() ? "" : ",") + axis_value(cells[i].values[a]);
    groups[key].push_back(i);
  }
  std::ostringstream agg;
  std::vector<std::string> group_axes;
  for (const auto& a : axes)
    if (a != "seed") group_axes.push_back(a);
  for (const auto& a : group_axes) agg << a << ',';
  agg << "epoch,runs,test_score_mean,test_score_sd,tdr_mean,tdr_sd,expected_density_mean\n";
  for (const auto& [key, members] : groups) {
    const auto epochs = outcomes[members.front()].result->trace.epochs.size();
    for (std::size_t ep = 0; ep < epochs; ++ep) {
      std::vector<double> score, tdrs, dens;
      for (auto i : members) {
        const auto& es = outcomes[i].result->trace.epochs;
        if (ep >= es.size()) continue;
        score.push_back(es[ep].test.score);
        if (es[ep].tdr) tdrs.push_back(*es[ep].tdr);
        dens.push_back(es[ep].expected_density);
      }
      auto mean = [](const std::vector<double>& v) {
        if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
        double s = 0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
      };
      auto sd = [&](const std::vector<double>& v) {
        if (v.size() < 2) return std::numeric_limits<double>::quiet_NaN();
        const double m = mean(v);
        double s = 0;
        for (double x : v) s += (x - m) * (x - m);
        return std::sqrt(s / static_cast<double>(v.size() - 1));
      };
      if (!key.empty()) agg << key << ',';
      agg << ep + 1 << ',' << score.size() << ',' << fmt(mean(score)) << ',' << fmt(sd(score)) << ',' << fmt(mean(tdrs))
          << ',' << fmt(sd(tdrs)) << ',' << fmt(mean(dens)) << '\n';
    }
  }

  try {
    fs::create_directories(base.output_dir);
    experiment_detail::write_text(fs::path(base.output_dir) / "summary.csv", summary.str());
    experiment_detail::write_text(fs::path(base.output_dir) / "aggregate.csv", agg.str());
  } catch (const std::exception& e) {
    log::warn(e.what());
    return kExitRuntime;
  }
  log::info(std::to_string(cells.size() - static_cast<std::size_t>(failed)) + " of " + std::to_string(cells.size()) +
            " cells succeeded; summary in " + (fs::path(base.output_dir) / "summary.csv").string());
  return failed == 0 ? kExitOk : kExitRuntime;
}

}  // namespace flops

#endif  // FLOPS_EXPERIMENT_HPP
