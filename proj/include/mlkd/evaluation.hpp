// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mlkd/tensor.hpp"

namespace mlkd {

struct EvalReport {
  std::string mode;
  double top1 = 0.0;
  std::optional<double> top5;  // present when K >= 5
  std::size_t n_test = 0;
  std::uint64_t seed = 0;
  std::vector<double> per_class;  // empty when not requested
};

void to_json(nlohmann::json& j, const EvalReport& r);

/// Fraction of rows whose argmax equals the label. Ties go to the lowest index.
double top1_accuracy(const Tensor& logits, std::span<const int> labels);

/// A row counts as correct when fewer than k classes outrank the label, with
/// the same lowest-index tie rule as top1_accuracy.
double topk_accuracy(const Tensor& logits, std::span<const int> labels, std::size_t k);

std::vector<int> argmax_rows(const Tensor& logits);

/// Accuracy per class id in [0, num_classes); NaN for classes absent from labels.
std::vector<double> per_class_accuracy(std::span<const int> predictions, std::span<const int> labels,
                                       std::size_t num_classes);

/// Cosine k-NN with unweighted majority vote. Neighbours with equal similarity
/// are ordered by train index; a tied vote goes to the class of the nearest
/// member among the tied classes.
std::vector<int> knn_classify(const Tensor& train_feats, std::span<const int> train_labels, const Tensor& test_feats,
                              std::size_t k = 10);

struct ProbeConfig {
  std::size_t epochs = 100;
  double lr = 0.1;
  std::vector<std::size_t> lr_decay_epochs{60, 80};
  double lr_decay_factor = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  /// Standardize features with the training mean and std before fitting.
  bool standardize = true;
};

void to_json(nlohmann::json& j, const ProbeConfig& c);
void from_json(const nlohmann::json& j, ProbeConfig& c);

/// Trains one affine layer with cross-entropy on frozen features and returns
/// test top-1.
double linear_probe(const Tensor& train_feats, std::span<const int> train_labels, const Tensor& test_feats,
                    std::span<const int> test_labels, const ProbeConfig& config = {});

enum class CkaKernel { linear, rbf };

CkaKernel parse_cka_kernel(const std::string& name);

/// HSIC(Kx, Ky) / sqrt(HSIC(Kx, Kx) HSIC(Ky, Ky)) with double-centred kernels.
/// The RBF bandwidth is `bandwidth_scale` times the median pairwise distance.
double cka_similarity(const Tensor& x, const Tensor& y, CkaKernel kernel, double bandwidth_scale = 0.5);

}  // namespace mlkd
