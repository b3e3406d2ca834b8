// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mlkd/training.hpp"

namespace mlkd {

struct AblationRow {
  std::string name;
  bool align = false;
  bool corr = false;
  bool sup = false;
};

/// The seven loss combinations of the ablation table, in table order.
const std::vector<AblationRow>& ablation_rows();

/// Keeps cross-entropy, zeroes KD and every distillation term the row omits.
LossWeights ablation_weights(const AblationRow& row, const LossWeights& base);

/// Cross-entropy only: the from-scratch baseline.
LossWeights scratch_weights(const LossWeights& base);

/// Classic logit distillation plus cross-entropy.
LossWeights kd_only_weights(const LossWeights& base);

/// Worker count for independent runs, from MLKD_THREADS (default 1).
std::size_t run_parallelism();

/// Calls job(i) for i in [0, count) on up to `workers` threads. Jobs must be
/// independent; the first exception is rethrown after all workers stop.
void parallel_for(std::size_t count, std::size_t workers, const std::function<void(std::size_t)>& job);

struct RunOutcome {
  std::string label;
  double fraction = 1.0;
  std::uint64_t seed = 0;
  double final_train_acc = 0.0;
  double final_eval_acc = 0.0;
};

struct SweepResult {
  std::vector<RunOutcome> runs;
  /// Mean final eval accuracy for each label, in first-seen order.
  std::vector<std::pair<std::string, double>> means() const;
  std::string to_csv() const;
};

SweepResult run_ablation(const DistillConfig& base, const Checkpoint& teacher, const Dataset& train,
                         const Dataset& eval, const std::vector<std::uint64_t>& seeds);

SweepResult run_fewshot(const DistillConfig& base, const Checkpoint& teacher, const Dataset& train,
                        const Dataset& eval, const std::vector<double>& fractions,
                        const std::vector<std::uint64_t>& seeds);

}  // namespace mlkd
