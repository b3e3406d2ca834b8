// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mlkd/data.hpp"
#include "mlkd/losses.hpp"
#include "mlkd/network.hpp"

namespace mlkd {

struct DistillConfig {
  std::uint64_t seed = 0;
  std::size_t epochs = 240;
  std::size_t batch_size = 64;
  double initial_lr = 0.05;
  std::vector<std::size_t> lr_decay_epochs{150, 180, 210};
  double lr_decay_factor = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  LossWeights weights;
  double transform_multiplier = 16.0;
  TeacherKind teacher_kind = TeacherKind::supervised;
  double few_shot_fraction = 1.0;
  /// Jitter std for flat inputs as a multiple of the per-feature std.
  double jitter_scale = 0.05;
  ArchSpec teacher_arch;
  ArchSpec student_arch;

  void validate() const;
};

void to_json(nlohmann::json& j, const DistillConfig& c);
/// Unknown keys are rejected; omitted keys keep their defaults.
void from_json(const nlohmann::json& j, DistillConfig& c);

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  LossBreakdown losses;
  double train_acc = 0.0;
  double eval_acc = 0.0;  // NaN when there is nothing to evaluate
  double seconds = 0.0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;

  static constexpr const char* kCsvHeader = "epoch,lr,align,corr,sup,ce,kd,total,train_acc,eval_acc,seconds";
  std::string to_csv() const;
  void save_csv(const std::filesystem::path& path) const;
};

struct TrainResult {
  Checkpoint checkpoint;
  TrainLog log;
};

/// v <- momentum v + (g + weight_decay p); p <- p - lr v.
/// `velocity` is created on first use.
void sgd_step(std::span<Tensor* const> params, std::span<const Tensor> grads, std::vector<Tensor>& velocity, double lr,
              double momentum, double weight_decay);

/// initial_lr * factor^(number of decay epochs <= epoch)
double lr_schedule(std::size_t epoch, const DistillConfig& config);

enum class AugmentMode { automatic, rotate, jitter };

struct AugmentOptions {
  AugmentMode mode = AugmentMode::automatic;
  double jitter_scale = 0.05;
  /// Per-feature std used for jitter; computed from the batch when empty.
  std::vector<double> feature_std;
};

/// A second view of each sample. For rotations, `quarter_turns[i]` is the
/// counter-clockwise turn applied to sample i and `overlap` marks, per
/// sample and per pixel of the original frame, the pixels present in both
/// views (all of them under pure rotation).
struct Augmentation {
  Tensor batch;
  std::vector<int> quarter_turns;
  std::vector<std::uint8_t> overlap;
};

Augmentation augment(const Tensor& batch, std::uint64_t seed, const AugmentOptions& options = {});

/// Rotates a C x H x W sample (or a batch of them) by k counter-clockwise
/// quarter turns.
Tensor rotate_quarter_turns(const Tensor& images, int k);

TrainResult pretrain_teacher(const DistillConfig& config, const Dataset& train, const Dataset* eval = nullptr);

TrainResult distill(const DistillConfig& config, const Checkpoint& teacher, const Dataset& train,
                    const Dataset* eval = nullptr);

Dataset subsample(const Dataset& ds, double fraction, std::uint64_t seed);

}  // namespace mlkd
