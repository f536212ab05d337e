// Copyright 2026 The FLoPS Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef FLOPS_FEDERATION_HPP
#define FLOPS_FEDERATION_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "flops/constraint.hpp"
#include "flops/gates.hpp"
#include "flops/log.hpp"
#include "flops/metrics.hpp"
#include "flops/models.hpp"
#include "flops/partition.hpp"
#include "flops/rng.hpp"

namespace flops {

enum class Algorithm { FLoPS, FLoPS_PA, FedIterHT, FedAvg };

inline std::string to_string(Algorithm a) {
  switch (a) {
    case Algorithm::FLoPS: return "FLoPS";
    case Algorithm::FLoPS_PA: return "FLoPS-PA";
    case Algorithm::FedIterHT: return "FedIter-HT";
    case Algorithm::FedAvg: return "FedAvg";
  }
  return "?";
}

inline Algorithm algorithm_from_string(const std::string& s) {
  if (s == "FLoPS") return Algorithm::FLoPS;
  if (s == "FLoPS-PA" || s == "FLoPS_PA") return Algorithm::FLoPS_PA;
  if (s == "FedIter-HT" || s == "FedIterHT") return Algorithm::FedIterHT;
  if (s == "FedAvg") return Algorithm::FedAvg;
  throw std::invalid_argument("unknown algorithm '" + s + "'");
}

inline bool is_gated(Algorithm a) { return a == Algorithm::FLoPS || a == Algorithm::FLoPS_PA; }

enum class Weighting {
  Uniform,  ///< w_k = 1 / K
  Samples,  ///< w_k = n_k / sum of participant n_j
};

struct ServerTuneConfig {
  bool enabled = false;
  double fraction = 0.05;  ///< share of the training rows held out at the server
  int steps = 10;
  double eta_theta = 0.01;
  double eta_phi = 0.001;
};

struct FederationConfig {
  Algorithm algorithm = Algorithm::FLoPS;
  int epochs = 50;
  int batch_size = 16;
  /// Local steps per epoch; 0 selects ceil(smallest shard / batch_size).
  int steps_per_epoch = 0;
  double participation = 0.1;
  double eta_theta = 0.05;
  double eta_phi = 0.01;
  /// Defaults to 1/|theta| (FLoPS) or 0.1/|theta| (FLoPS-PA).
  std::optional<double> eta_lambda;
  double rho_targ = 0.05;
  double rho_init = 0.95;
  double init_sigma = 0.1;
  double theta_init_std = 0.01;
  /// Defaults to 60% of the epochs for FLoPS and 0 for FLoPS-PA.
  std::optional<int> prune_start;
  double decay_r = 0.05;
  ScaleMode scale_mode = ScaleMode::SignAware;
  int mc_samples = 1;
  /// Defaults to Uniform for FLoPS and Samples for the parameter-averaging algorithms.
  std::optional<Weighting> weighting;
  ServerTuneConfig tune;
  GateHyper hyper;
  std::uint64_t seed = 0;
  bool keep_history = true;

  Weighting resolved_weighting() const {
    return weighting.value_or(algorithm == Algorithm::FLoPS ? Weighting::Uniform : Weighting::Samples);
  }
  int resolved_prune_start() const {
    if (prune_start) return *prune_start;
    return algorithm == Algorithm::FLoPS ? static_cast<int>(std::floor(0.6 * epochs)) : 0;
  }
  double resolved_eta_lambda(Eigen::Index size) const {
    if (eta_lambda) return *eta_lambda;
    return (algorithm == Algorithm::FLoPS_PA ? 0.1 : 1.0) / static_cast<double>(size);
  }
  PruneSchedule schedule() const { return {resolved_prune_start(), decay_r, scale_mode}; }

  void validate() const {
    if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (steps_per_epoch < 0) throw std::invalid_argument("steps_per_epoch must be >= 0");
    if (!(participation > 0.0 && participation <= 1.0)) throw std::invalid_argument("participation must lie in (0, 1]");
    if (!(rho_targ > 0.0 && rho_targ <= 1.0)) throw std::invalid_argument("rho_targ must lie in (0, 1]");
    if (!(rho_init > 0.0 && rho_init < 1.0)) throw std::invalid_argument("rho_init must lie in (0, 1)");
    if (!(eta_theta > 0.0) || !(eta_phi > 0.0)) throw std::invalid_argument("learning rates must be positive");
    if (eta_lambda && !(*eta_lambda > 0.0)) throw std::invalid_argument("eta_lambda must be positive");
    if (init_sigma < 0.0 || theta_init_std < 0.0) throw std::invalid_argument("initialization scales must be >= 0");
    if (decay_r < 0.0 || decay_r >= 1.0) throw std::invalid_argument("decay_r must lie in [0, 1)");
    if (mc_samples < 1) throw std::invalid_argument("mc_samples must be >= 1");
    if (!hyper.valid()) throw std::invalid_argument("invalid hard concrete hyperparameters");
    if (tune.enabled && (tune.steps < 0 || !(tune.fraction > 0.0 && tune.fraction < 1.0)))
      throw std::invalid_argument("server tuning needs steps >= 0 and fraction in (0, 1)");
  }

  /// Learning rates outside the ranges known to train stably.
  std::vector<std::string> guidance_warnings() const {
    std::vector<std::string> w;
    if (eta_theta < 1e-4 || eta_theta > 1e-1) w.push_back("eta_theta outside [1e-4, 1e-1]");
    if (is_gated(algorithm) && (eta_phi < 1e-5 || eta_phi > 1e-1)) w.push_back("eta_phi outside [1e-5, 1e-1]");
    return w;
  }
};

/// Bytes exchanged, assuming 4 bytes per value and 4-byte indices.
/// The per-link counters follow one participant's link; the totals sum all participants.
struct CommLedger {
  std::uint64_t uplink_value_bytes = 0;
  std::uint64_t uplink_index_bytes = 0;
  std::uint64_t downlink_value_bytes = 0;
  std::uint64_t downlink_index_bytes = 0;
  std::uint64_t total_uplink_bytes = 0;
  std::uint64_t total_downlink_bytes = 0;
  std::uint64_t rounds = 0;

  void exchange(std::uint64_t up_values, std::uint64_t up_indices, std::uint64_t down_values, std::uint64_t down_indices,
                std::size_t participants) {
    uplink_value_bytes += 4 * up_values;
    uplink_index_bytes += 4 * up_indices;
    downlink_value_bytes += 4 * down_values;
    downlink_index_bytes += 4 * down_indices;
    total_uplink_bytes += 4 * (up_values + up_indices) * participants;
    total_downlink_bytes += 4 * (down_values + down_indices) * participants;
    ++rounds;
  }
};

struct AggregationWeights {
  std::vector<double> w;
};

inline AggregationWeights aggregation_weights(const std::vector<int>& participants, const std::vector<ClientShard>& shards,
                                              Weighting mode) {
  AggregationWeights out;
  out.w.resize(participants.size());
  if (mode == Weighting::Uniform) {
    std::fill(out.w.begin(), out.w.end(), 1.0 / static_cast<double>(participants.size()));
    return out;
  }
  double total = 0.0;
  for (int k : participants) total += static_cast<double>(shards.at(static_cast<std::size_t>(k)).n());
  for (std::size_t i = 0; i < participants.size(); ++i)
    out.w[i] = static_cast<double>(shards[static_cast<std::size_t>(participants[i])].n()) / total;
  return out;
}

/// Compressed FLoPS-PA payload: the top-m coordinates of theta with their gate
/// values, plus the mean gate over every other coordinate.
struct PaMessage {
  std::vector<std::uint32_t> top_indices;
  std::vector<double> theta_top;
  std::vector<double> z_top;
  double z_avg_rest = 0.0;

  std::size_t value_count() const { return theta_top.size() + z_top.size() + 1; }
  std::size_t index_count() const { return top_indices.size(); }

  void validate(Eigen::Index size) const {
    if (theta_top.size() != top_indices.size() || z_top.size() != top_indices.size())
      throw std::invalid_argument("malformed message: value and index lists differ in length");
    for (std::size_t i = 0; i < top_indices.size(); ++i) {
      if (top_indices[i] >= static_cast<std::uint64_t>(size)) throw std::invalid_argument("malformed message: index out of range");
      if (i > 0 && top_indices[i] <= top_indices[i - 1]) throw std::invalid_argument("malformed message: indices not strictly increasing");
      if (!(z_top[i] >= 0.0 && z_top[i] <= 1.0)) throw std::invalid_argument("malformed message: gate value outside [0, 1]");
    }
    if (!(z_avg_rest >= 0.0 && z_avg_rest <= 1.0)) throw std::invalid_argument("malformed message: gate average outside [0, 1]");
  }
};

inline PaMessage encode_pa_message(const Vec& theta, const Vec& z, Eigen::Index m) {
  if (theta.size() != z.size()) throw std::invalid_argument("theta and z lengths differ");
  PaMessage msg;
  const auto idx = top_m_indices(theta, m);
  std::vector<bool> on(static_cast<std::size_t>(theta.size()), false);
  for (auto j : idx) {
    on[static_cast<std::size_t>(j)] = true;
    msg.top_indices.push_back(static_cast<std::uint32_t>(j));
    msg.theta_top.push_back(theta[j]);
    msg.z_top.push_back(z[j]);
  }
  double rest = 0.0;
  Eigen::Index count = 0;
  for (Eigen::Index j = 0; j < z.size(); ++j)
    if (!on[static_cast<std::size_t>(j)]) {
      rest += z[j];
      ++count;
    }
  msg.z_avg_rest = count > 0 ? rest / static_cast<double>(count) : 0.0;
  return msg;
}

/// Full-length theta (zero off-support) and z (z_avg_rest off-support).
struct ExpandedMessage {
  Vec theta;
  Vec z;
};

inline ExpandedMessage expand_pa_message(const PaMessage& msg, Eigen::Index size) {
  msg.validate(size);
  ExpandedMessage out{Vec::Zero(size), Vec::Constant(size, msg.z_avg_rest)};
  for (std::size_t i = 0; i < msg.top_indices.size(); ++i) {
    out.theta[msg.top_indices[i]] = msg.theta_top[i];
    out.z[msg.top_indices[i]] = msg.z_top[i];
  }
  return out;
}

struct DecodedModel {
  Vec theta_tilde;
  GateParams gates;
};

/// theta_tilde = theta / z and log alpha = beta' logit(z), with z clamped to [eps, 1 - eps].
inline DecodedModel recover_parameters(const Vec& theta, const Vec& z, const GateHyper& hyper) {
  const Vec zc = z.unaryExpr([](double v) { return std::clamp(v, gates::kZEps, 1.0 - gates::kZEps); });
  return {theta.cwiseQuotient(zc), GateParams{log_alpha_from_z(z, hyper), hyper}};
}

inline DecodedModel decode_pa_message(const PaMessage& msg, Eigen::Index size, const GateHyper& hyper = {}) {
  const auto full = expand_pa_message(msg, size);
  return recover_parameters(full.theta, full.z, hyper);
}

/// Zeroes all but the m largest magnitudes.
inline Vec hard_threshold(const Vec& theta, Eigen::Index m) {
  const auto mask = top_m_mask(theta, m);
  Vec out = theta;
  for (Eigen::Index j = 0; j < out.size(); ++j)
    if (!mask[static_cast<std::size_t>(j)]) out[j] = 0.0;
  return out;
}

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  TestMetrics test;
  /// Mean expected gate for gated models, nonzero fraction otherwise.
  double expected_density = 0.0;
  /// Test-time gates above zero (gated) or nonzero weights (dense).
  Eigen::Index active_gates = 0;
  /// Nonzero weights of the evaluated model.
  Eigen::Index nonzeros = 0;
  std::optional<double> tdr;
  std::optional<double> tdr_topm;
  double lambda = 0.0;
  /// Constraint value fed to the most recent dual update.
  std::optional<double> constraint;
  CommLedger ledger;
};

struct TrainingTrace {
  Algorithm algorithm = Algorithm::FLoPS;
  TaskKind task;
  std::vector<EpochRecord> epochs;
  /// Test-time gates (gated) or nonzero masks (dense) per epoch, when kept.
  std::vector<Vec> gate_history;
  std::vector<std::vector<bool>> mask_history;
  Vec theta_tilde;
  std::optional<GateParams> gates;
  Vec effective;
  CommLedger ledger;
  int steps_per_epoch = 0;
};

/// Data the runners evaluate against; all optional.
struct EvalContext {
  const Dataset* test = nullptr;
  const Support* truth = nullptr;
  const Dataset* tune = nullptr;
};

inline SparseModel init_sparse_model(const TaskKind& task, Eigen::Index input_dim, const FederationConfig& cfg, Rng& rng) {
  SparseModel model;
  model.task = task;
  model.input_dim = input_dim;
  const auto size = SparseModel::parameter_count(task, input_dim);
  model.theta_tilde = Vec(size);
  for (Eigen::Index j = 0; j < size; ++j) model.theta_tilde[j] = cfg.theta_init_std > 0.0 ? rng.normal(0.0, cfg.theta_init_std) : 0.0;
  model.gates = init_gate_params(size, cfg.rho_init, cfg.init_sigma, rng, cfg.hyper);
  return model;
}

namespace fed_detail {

inline int steps_per_epoch(const FederationConfig& cfg, const std::vector<ClientShard>& shards) {
  if (cfg.steps_per_epoch > 0) return cfg.steps_per_epoch;
  Eigen::Index smallest = std::numeric_limits<Eigen::Index>::max();
  for (const auto& s : shards) smallest = std::min(smallest, s.n());
  return static_cast<int>(std::max<Eigen::Index>(1, (smallest + cfg.batch_size - 1) / cfg.batch_size));
}

/// B rows without replacement, or with replacement when the shard is smaller than B.
inline Dataset draw_batch(const ClientShard& shard, int batch, Rng& rng, bool& warned) {
  const auto n = static_cast<std::size_t>(shard.n());
  const auto B = static_cast<std::size_t>(batch);
  std::vector<std::size_t> idx;
  if (n >= B) {
    idx = rng.sample_without_replacement(n, B);
  } else {
    if (!warned) log::warn("client " + std::to_string(shard.client_id) + " holds fewer rows than the batch size; sampling with replacement");
    warned = true;
    idx.resize(B);
    for (auto& i : idx) i = rng.index(n);
  }
  return shard.data.subset(idx);
}

inline void check_inputs(const FederationConfig& cfg, const std::vector<ClientShard>& shards, Eigen::Index input_dim) {
  cfg.validate();
  if (shards.empty()) throw std::invalid_argument("no client shards");
  for (const auto& s : shards)
    if (s.data.dim() != input_dim) throw std::invalid_argument("client shard feature dimension differs from the model");
  for (const auto& w : cfg.guidance_warnings()) log::warn(w);
}

/// One gated SGD step on (theta_tilde, log alpha) including the density term.
inline double gated_step(SparseModel& model, const DensityConstraint& dual, const Dataset& batch, double eta_theta,
                         double eta_phi, int draws, Rng& rng) {
  double l = 0.0;
  const GradPair g = backward_mc(model, batch, draws, rng, &l);
  const Vec cg = constraint_gradient(model.gates);
  model.theta_tilde -= eta_theta * g.g_theta;
  model.gates.log_alpha -= eta_phi * (g.g_phi + dual.lambda * cg);
  return l;
}

inline void check_finite(double train_loss, const Vec& theta, int epoch) {
  if (!std::isfinite(train_loss) || !theta.allFinite())
    throw std::runtime_error("training diverged at epoch " + std::to_string(epoch) + "; lower eta_theta");
}

/// The evaluated model is theta_tilde * z_hat, cut to its top m entries when
/// `broadcast_top_m` (the FLoPS-PA server only ever ships those).
inline Vec evaluated_weights(const SparseModel& model, Eigen::Index m, bool broadcast_top_m) {
  const Vec eff = model.theta_tilde.cwiseProduct(test_time_gates(model.gates));
  return broadcast_top_m ? hard_threshold(eff, m) : eff;
}

inline EpochRecord gated_record(int epoch, double train_loss, const SparseModel& model, const DensityConstraint& dual,
                                std::optional<double> constraint, const CommLedger& ledger, Eigen::Index m,
                                bool broadcast_top_m, const EvalContext& ctx, TrainingTrace& trace, bool keep_history) {
  check_finite(train_loss, model.theta_tilde, epoch);
  EpochRecord r;
  r.epoch = epoch;
  r.train_loss = train_loss;
  const Vec zhat = test_time_gates(model.gates);
  const Vec eff = evaluated_weights(model, m, broadcast_top_m);
  if (ctx.test) r.test = evaluate(*ctx.test, eff, model.task);
  r.expected_density = expected_gate(model.gates).mean();
  r.active_gates = (zhat.array() > 0.0).count();
  r.nonzeros = (eff.array() != 0.0).count();
  if (ctx.truth && !ctx.truth->empty()) {
    r.tdr = tdr(nonzero_support(zhat), *ctx.truth);
    r.tdr_topm = tdr(top_m_indices(eff, m), *ctx.truth);
  }
  r.lambda = dual.lambda;
  r.constraint = constraint;
  r.ledger = ledger;
  if (keep_history) trace.gate_history.push_back(zhat);
  return r;
}

inline void finish_gated(TrainingTrace& trace, const SparseModel& model, const CommLedger& ledger, Eigen::Index m,
                         bool broadcast_top_m) {
  trace.theta_tilde = model.theta_tilde;
  trace.gates = model.gates;
  trace.effective = evaluated_weights(model, m, broadcast_top_m);
  trace.ledger = ledger;
}

}  // namespace fed_detail

/// Gated SGD on a server-held shard; full-batch gradients, lambda held fixed.
inline SparseModel server_tune(SparseModel model, const DensityConstraint& dual, const Dataset* tune_shard, int steps,
                               double eta_theta, double eta_phi, int draws, Rng& rng) {
  if (steps <= 0) return model;
  if (!tune_shard || tune_shard->rows() < 1) throw std::invalid_argument("server tuning enabled without a tune shard");
  for (int s = 0; s < steps; ++s) fed_detail::gated_step(model, dual, *tune_shard, eta_theta, eta_phi, draws, rng);
  return model;
}

/// Gradient aggregation every mini-batch; the server owns the model and the dual.
inline TrainingTrace run_flops(const FederationConfig& cfg, const std::vector<ClientShard>& shards, SparseModel model,
                               DensityConstraint dual, const EvalContext& ctx = {}) {
  if (cfg.algorithm != Algorithm::FLoPS) throw std::invalid_argument("run_flops needs algorithm FLoPS");
  model.validate();
  fed_detail::check_inputs(cfg, shards, model.input_dim);
  const auto size = model.size();
  const auto m = top_m_count(dual.rho_targ, size);
  if (m < 1) throw std::invalid_argument("rho_targ * |theta| must be at least 1");
  const int clients = static_cast<int>(shards.size());
  const int nb = fed_detail::steps_per_epoch(cfg, shards);
  const auto schedule = cfg.schedule();
  const Rng root(cfg.seed);
  Rng tune_rng = root.fork(5);

  TrainingTrace trace;
  trace.algorithm = cfg.algorithm;
  trace.task = model.task;
  trace.steps_per_epoch = nb;
  CommLedger ledger;
  bool warned = false;
  std::optional<double> last_constraint;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng part_rng = root.fork(1, epoch);
    const auto participants = sample_participants(clients, cfg.participation, part_rng);
    const auto weights = aggregation_weights(participants, shards, cfg.resolved_weighting());
    double loss_sum = 0.0;
    for (int step = 0; step < nb; ++step) {
      Vec g_theta = Vec::Zero(size), g_phi = Vec::Zero(size);
      for (std::size_t i = 0; i < participants.size(); ++i) {
        const int k = participants[i];
        Rng crng = root.fork(2, epoch, step, k);
        const Dataset batch = fed_detail::draw_batch(shards[static_cast<std::size_t>(k)], cfg.batch_size, crng, warned);
        double l = 0.0;
        const GradPair g = backward_mc(model, batch, cfg.mc_samples, crng, &l);
        g_theta += weights.w[i] * g.g_theta;
        g_phi += weights.w[i] * g.g_phi;
        loss_sum += weights.w[i] * l;
      }
      const double violation = constraint_value(model.gates, dual.rho_targ);
      const Vec cg = constraint_gradient(model.gates);
      model.theta_tilde -= cfg.eta_theta * g_theta;
      model.gates.log_alpha -= cfg.eta_phi * (g_phi + dual.lambda * cg);
      dual = dual_update(dual, violation);
      last_constraint = violation;
      // gradients up; model plus lambda down
      const auto vals = static_cast<std::uint64_t>(2 * size);
      ledger.exchange(vals, 0, vals + 1, 0, participants.size());
    }
    if (cfg.tune.enabled) model = server_tune(std::move(model), dual, ctx.tune, cfg.tune.steps, cfg.tune.eta_theta, cfg.tune.eta_phi, cfg.mc_samples, tune_rng);
    if (schedule.active(epoch)) {
      const Vec eff = model.theta_tilde.cwiseProduct(test_time_gates(model.gates));
      model.gates = scale_log_alpha(std::move(model.gates), eff, m, schedule.decay_r, schedule.mode);
    }
    trace.epochs.push_back(fed_detail::gated_record(epoch, loss_sum / nb, model, dual, last_constraint, ledger, m, false,
                                                    ctx, trace, cfg.keep_history));
  }
  fed_detail::finish_gated(trace, model, ledger, m, false);
  return trace;
}

/// Local SGD with compressed parameter/gate exchange once per epoch.
inline TrainingTrace run_flops_pa(const FederationConfig& cfg, const std::vector<ClientShard>& shards, SparseModel model,
                                  DensityConstraint dual, const EvalContext& ctx = {}) {
  if (cfg.algorithm != Algorithm::FLoPS_PA) throw std::invalid_argument("run_flops_pa needs algorithm FLoPS-PA");
  model.validate();
  fed_detail::check_inputs(cfg, shards, model.input_dim);
  const auto size = model.size();
  const auto m = top_m_count(dual.rho_targ, size);
  if (m < 1) throw std::invalid_argument("rho_targ * |theta| must be at least 1");
  const int clients = static_cast<int>(shards.size());
  const int nb = fed_detail::steps_per_epoch(cfg, shards);
  const auto schedule = cfg.schedule();
  const auto& hyper = model.gates.hyper;
  const Rng root(cfg.seed);
  Rng tune_rng = root.fork(5);

  TrainingTrace trace;
  trace.algorithm = cfg.algorithm;
  trace.task = model.task;
  trace.steps_per_epoch = nb;
  CommLedger ledger;
  bool warned = false;
  std::optional<double> last_constraint;

  // server state travels as (theta, z); the initial z is a training-time sample
  Rng init_rng = root.fork(0);
  Vec z_server = sample_gates(model.gates, init_rng).z;
  Vec theta_server = model.theta_tilde.cwiseProduct(z_server);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng part_rng = root.fork(1, epoch);
    const auto participants = sample_participants(clients, cfg.participation, part_rng);
    const auto weights = aggregation_weights(participants, shards, cfg.resolved_weighting());
    const PaMessage down = encode_pa_message(theta_server, z_server, m);
    const DecodedModel start = decode_pa_message(down, size, hyper);

    Vec theta_avg = Vec::Zero(size), z_avg = Vec::Zero(size);
    double loss_sum = 0.0;
    std::size_t up_values = 0, up_indices = 0;
    for (std::size_t i = 0; i < participants.size(); ++i) {
      const int k = participants[i];
      Rng crng = root.fork(2, epoch, k);
      SparseModel local = model;
      local.theta_tilde = start.theta_tilde;
      local.gates = start.gates;
      DensityConstraint local_dual = dual;
      double local_loss = 0.0;
      for (int step = 0; step < nb; ++step) {
        const Dataset batch = fed_detail::draw_batch(shards[static_cast<std::size_t>(k)], cfg.batch_size, crng, warned);
        const double violation = constraint_value(local.gates, local_dual.rho_targ);
        local_loss += fed_detail::gated_step(local, local_dual, batch, cfg.eta_theta, cfg.eta_phi, cfg.mc_samples, crng);
        local_dual = dual_update(local_dual, violation);
      }
      fed_detail::check_finite(local_loss, local.theta_tilde, epoch);
      loss_sum += weights.w[i] * local_loss / nb;
      if (schedule.active(epoch)) {
        const Vec eff = local.theta_tilde.cwiseProduct(test_time_gates(local.gates));
        local.gates = scale_log_alpha(std::move(local.gates), eff, m, schedule.decay_r, schedule.mode);
      }
      const Vec z_k = sample_gates(local.gates, crng).z;
      const PaMessage up = encode_pa_message(local.theta_tilde.cwiseProduct(z_k), z_k, m);
      up_values = up.value_count();
      up_indices = up.index_count();
      const auto full = expand_pa_message(up, size);
      theta_avg += weights.w[i] * full.theta;
      z_avg += weights.w[i] * full.z;
    }
    ledger.exchange(up_values, up_indices, down.value_count(), down.index_count(), participants.size());

    const DecodedModel agg = recover_parameters(theta_avg, z_avg, hyper);
    model.theta_tilde = agg.theta_tilde;
    model.gates = agg.gates;
    const double violation = constraint_value(model.gates, dual.rho_targ);
    dual = dual_update(dual, violation);
    last_constraint = violation;
    if (cfg.tune.enabled) model = server_tune(std::move(model), dual, ctx.tune, cfg.tune.steps, cfg.tune.eta_theta, cfg.tune.eta_phi, cfg.mc_samples, tune_rng);
    if (schedule.active(epoch)) {
      const Vec eff = model.theta_tilde.cwiseProduct(test_time_gates(model.gates));
      model.gates = scale_log_alpha(std::move(model.gates), eff, m, schedule.decay_r, schedule.mode);
    }
    z_server = z_from_log_alpha(model.gates.log_alpha, hyper);
    theta_server = model.theta_tilde.cwiseProduct(z_server);

    trace.epochs.push_back(fed_detail::gated_record(epoch, loss_sum, model, dual, last_constraint, ledger, m, true, ctx,
                                                    trace, cfg.keep_history));
  }
  fed_detail::finish_gated(trace, model, ledger, m, true);
  return trace;
}

namespace fed_detail {

/// Local SGD plus parameter averaging on an un-gated model. `threshold_every_round`
/// selects FedIter-HT; otherwise the model is pruned after the final epoch only.
inline TrainingTrace run_dense(const FederationConfig& cfg, const std::vector<ClientShard>& shards, Vec theta,
                               const TaskKind& task, Eigen::Index input_dim, bool threshold_every_round,
                               const EvalContext& ctx) {
  check_inputs(cfg, shards, input_dim);
  const auto size = theta.size();
  if (size != SparseModel::parameter_count(task, input_dim)) throw std::invalid_argument("dense model has wrong length");
  const auto m = top_m_count(cfg.rho_targ, size);
  if (m < 1) throw std::invalid_argument("rho_targ * |theta| must be at least 1");
  const int clients = static_cast<int>(shards.size());
  const int nb = steps_per_epoch(cfg, shards);
  const Rng root(cfg.seed);

  TrainingTrace trace;
  trace.algorithm = cfg.algorithm;
  trace.task = task;
  trace.steps_per_epoch = nb;
  CommLedger ledger;
  bool warned = false;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng part_rng = root.fork(1, epoch);
    const auto participants = sample_participants(clients, cfg.participation, part_rng);
    const auto weights = aggregation_weights(participants, shards, cfg.resolved_weighting());
    Vec avg = Vec::Zero(size);
    double loss_sum = 0.0;
    for (std::size_t i = 0; i < participants.size(); ++i) {
      const int k = participants[i];
      Rng crng = root.fork(2, epoch, k);
      Vec local = theta;
      double local_loss = 0.0;
      for (int step = 0; step < nb; ++step) {
        const Dataset batch = draw_batch(shards[static_cast<std::size_t>(k)], cfg.batch_size, crng, warned);
        Vec g;
        local_loss += glm::loss_and_gradient(batch, local, task, &g);
        local -= cfg.eta_theta * g;
      }
      loss_sum += weights.w[i] * local_loss / nb;
      avg += weights.w[i] * local;
    }
    const bool prune = threshold_every_round || epoch == cfg.epochs;
    theta = prune ? hard_threshold(avg, m) : avg;
    check_finite(loss_sum, theta, epoch);
    if (threshold_every_round) {
      ledger.exchange(static_cast<std::uint64_t>(m), static_cast<std::uint64_t>(m), static_cast<std::uint64_t>(m),
                      static_cast<std::uint64_t>(m), participants.size());
    } else {
      ledger.exchange(static_cast<std::uint64_t>(size), 0, static_cast<std::uint64_t>(size), 0, participants.size());
    }

    EpochRecord r;
    r.epoch = epoch;
    r.train_loss = loss_sum;
    if (ctx.test) r.test = evaluate(*ctx.test, theta, task);
    const auto nz = nonzero_support(theta);
    r.active_gates = static_cast<Eigen::Index>(nz.size());
    r.nonzeros = r.active_gates;
    r.expected_density = static_cast<double>(nz.size()) / static_cast<double>(size);
    if (ctx.truth && !ctx.truth->empty()) {
      r.tdr = tdr(nz, *ctx.truth);
      r.tdr_topm = tdr(top_m_indices(theta, m), *ctx.truth);
    }
    r.ledger = ledger;
    if (cfg.keep_history) {
      std::vector<bool> mask(static_cast<std::size_t>(size));
      for (Eigen::Index j = 0; j < size; ++j) mask[static_cast<std::size_t>(j)] = theta[j] != 0.0;
      trace.mask_history.push_back(std::move(mask));
    }
    trace.epochs.push_back(std::move(r));
  }
  trace.theta_tilde = theta;
  trace.effective = theta;
  trace.ledger = ledger;
  return trace;
}

}  // namespace fed_detail

/// Dense local SGD, averaging, then hard thresholding to the top-m magnitudes every round.
inline TrainingTrace run_fediter_ht(const FederationConfig& cfg, const std::vector<ClientShard>& shards, Vec theta,
                                    const TaskKind& task, Eigen::Index input_dim, const EvalContext& ctx = {}) {
  if (cfg.algorithm != Algorithm::FedIterHT) throw std::invalid_argument("run_fediter_ht needs algorithm FedIter-HT");
  return fed_detail::run_dense(cfg, shards, std::move(theta), task, input_dim, true, ctx);
}

/// Dense FedAvg with magnitude pruning after the final epoch.
inline TrainingTrace run_fedavg(const FederationConfig& cfg, const std::vector<ClientShard>& shards, Vec theta,
                                const TaskKind& task, Eigen::Index input_dim, const EvalContext& ctx = {}) {
  if (cfg.algorithm != Algorithm::FedAvg) throw std::invalid_argument("run_fedavg needs algorithm FedAvg");
  return fed_detail::run_dense(cfg, shards, std::move(theta), task, input_dim, false, ctx);
}

/// Initializes the model from cfg.seed and dispatches on cfg.algorithm.
inline TrainingTrace run_federation(const FederationConfig& cfg, const std::vector<ClientShard>& shards,
                                    const TaskKind& task, Eigen::Index input_dim, const EvalContext& ctx = {}) {
  Rng init_rng = Rng(cfg.seed).fork(4);
  SparseModel model = init_sparse_model(task, input_dim, cfg, init_rng);
  if (is_gated(cfg.algorithm)) {
    DensityConstraint dual{cfg.rho_targ, 0.0, cfg.resolved_eta_lambda(model.size())};
    return cfg.algorithm == Algorithm::FLoPS ? run_flops(cfg, shards, std::move(model), dual, ctx)
                                             : run_flops_pa(cfg, shards, std::move(model), dual, ctx);
  }
  return cfg.algorithm == Algorithm::FedIterHT ? run_fediter_ht(cfg, shards, model.theta_tilde, task, input_dim, ctx)
                                               : run_fedavg(cfg, shards, model.theta_tilde, task, input_dim, ctx);
}

}  // namespace flops

#endif  // FLOPS_FEDERATION_HPP
