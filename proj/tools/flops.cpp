// Copyright 2026 The FLoPS Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line runner: `flops run <config>` and `flops sweep <config>`.

#include <CLI11.hpp>
#include <iostream>
#include <optional>
#include <string>
#include <thread>

#include "flops/experiment.hpp"

namespace {

int with_config(const std::string& path, const std::optional<std::string>& out, const std::optional<std::uint64_t>& seed,
                int (*body)(flops::ExperimentConfig&, int), int jobs) {
  flops::ExperimentConfig cfg;
  try {
    cfg = flops::load_config(path);
  } catch (const flops::ConfigError& e) {
    std::cerr << "flops: config error: " << e.what() << '\n';
    return flops::kExitConfig;
  }
  if (out) cfg.output_dir = *out;
  if (seed) cfg.seed = *seed;
  return body(cfg, jobs);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated L0-constrained sparse training simulator"};
  app.require_subcommand(1);
  std::string config;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  int jobs = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  bool quiet = false;

  app.add_flag("-q,--quiet", quiet, "suppress warnings and progress messages");
  auto* run = app.add_subcommand("run", "train one configuration");
  run->add_option("config", config, "experiment config (JSON, comments allowed)")->required();
  run->add_option("--out", out, "output directory (overrides output_dir)");
  run->add_option("--seed", seed, "master seed (overrides seed)");

  auto* sweep = app.add_subcommand("sweep", "train every cell of the config's grid block");
  sweep->add_option("config", config, "experiment config with a grid block")->required();
  sweep->add_option("--out", out, "output directory (overrides output_dir)");
  sweep->add_option("--seed", seed, "master seed for cells without a seed axis");
  sweep->add_option("--jobs,-j", jobs, "cells trained in parallel")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : flops::kExitConfig;
  }
  flops::log::quiet() = quiet;

  if (*run) return with_config(config, out, seed, [](flops::ExperimentConfig& c, int) { return flops::run_experiment(c); }, 1);
  return with_config(config, out, seed, [](flops::ExperimentConfig& c, int j) { return flops::run_sweep(c, j); }, jobs);
}
