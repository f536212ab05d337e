// Copyright 2026 The FLoPS Authors
// SPDX-License-Identifier: Apache-2.0

// Library usage without the config layer: sparse logistic regression on
// synthetic data, 20 clients, 5% target density.

#include <cstdio>

#include "flops/federation.hpp"
#include "flops/synthdata.hpp"

int main() {
  using namespace flops;

  SynthSpec spec;
  spec.n = 4000;
  spec.p = 200;
  spec.task = TaskKind::logistic();
  spec.seed = 7;
  const SyntheticData synth = make_synthetic(spec);

  Rng rng(11);
  Rng split_rng = rng.fork(1);
  const auto order = partition_detail::shuffled_range(static_cast<std::size_t>(spec.n), split_rng);
  const std::vector<std::size_t> train_rows(order.begin(), order.begin() + 3200);
  const std::vector<std::size_t> test_rows(order.begin() + 3200, order.end());
  const Dataset train = synth.data.subset(train_rows);
  const Dataset test = synth.data.subset(test_rows);

  Rng part_rng = rng.fork(2);
  const auto shards = dirichlet_quantity_split(train, 20, 1000.0, part_rng);

  FederationConfig cfg;
  cfg.algorithm = Algorithm::FLoPS;
  cfg.epochs = 60;
  cfg.participation = 0.25;
  cfg.steps_per_epoch = 20;
  cfg.eta_theta = 0.01;
  cfg.decay_r = 0.3;
  cfg.rho_targ = 0.05;
  cfg.seed = 3;

  const TrainingTrace trace = run_federation(cfg, shards, spec.task, spec.p, {&test, &synth.truth.support});
  for (const auto& e : trace.epochs)
    if (e.epoch % 10 == 0)
      std::printf("epoch %2d  accuracy %.3f  density %.3f  active %3ld  TDR %.2f\n", e.epoch, e.test.score,
                  e.expected_density, static_cast<long>(e.active_gates), e.tdr.value_or(0.0));
  return 0;
}
