// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "mlkd/data.hpp"
#include "mlkd/evaluation.hpp"
#include "mlkd/quantification.hpp"
#include "mlkd/training.hpp"

namespace mlkd {

struct DataSection {
  GeneratorSpec generator;
  std::uint64_t seed = 0;
  std::vector<double> split{0.8, 0.2};  // train, test
};

struct EvalSection {
  std::string mode = "top1";
  std::size_t k = 10;
  std::string cka_kernel = "rbf";
  double cka_bandwidth_scale = 0.5;
};

struct QuantifySection {
  std::size_t count = 16;
  EntropyConfig entropy;
};

struct SweepSection {
  std::vector<double> fractions{0.25, 0.5, 0.75, 1.0};
  std::vector<std::uint64_t> seeds{0};
};

/// The experiment file. Unknown keys are rejected at every level.
struct ExperimentConfig {
  DistillConfig distill;
  DataSection data;
  EvalSection eval;
  ProbeConfig probe;
  QuantifySection quantify;
  SweepSection sweep;
  std::string output_dir = "run";
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

ExperimentConfig load_experiment_config(const std::string& path);

enum ExitCode : int { kExitOk = 0, kExitConfig = 1, kExitRuntime = 2 };

/// Runs one subcommand. `args` excludes the program name. Errors go to `err`
/// as "error[<kind>]: message".
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mlkd
