// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "mlkd/tensor.hpp"

namespace mlkd {

/// Synthetic dataset description.
///
/// `clusters`: Gaussian class centres with spread `spread`, within-class noise
/// `noise`, optionally passed through a fixed random residual tanh warp.
/// `bars`: 1 x S x S images of two perpendicular bar families whose angle and
/// period identify the class; every class is closed under 90 degree rotation.
struct GeneratorSpec {
  std::string family = "clusters";
  std::size_t num_classes = 10;
  std::size_t samples_per_class = 100;
  std::size_t input_dim = 32;
  std::size_t image_size = 12;
  double spread = 1.0;
  double noise = 1.0;
  bool warp = false;
  /// Gaussian modes per class for `clusters`; samples cycle through them.
  std::size_t modes_per_class = 1;

  friend bool operator==(const GeneratorSpec&, const GeneratorSpec&) = default;
};

void to_json(nlohmann::json& j, const GeneratorSpec& s);
void from_json(const nlohmann::json& j, GeneratorSpec& s);

struct Dataset {
  Tensor inputs;            // N x F or N x C x H x W, values representable as f32
  std::vector<int> labels;  // empty for unlabeled data
  std::size_t num_classes = 0;
  nlohmann::json generator = nlohmann::json::object();

  std::size_t size() const { return inputs.rows(); }
  bool has_labels() const { return !labels.empty(); }
  Shape sample_shape() const { return Shape(inputs.shape().begin() + 1, inputs.shape().end()); }
  bool is_image() const { return inputs.rank() == 4; }

  Dataset subset(std::span<const std::size_t> indices) const;
  std::vector<std::size_t> class_counts() const;
  void validate() const;

  friend bool operator==(const Dataset& a, const Dataset& b) {
    return a.inputs == b.inputs && a.labels == b.labels && a.num_classes == b.num_classes &&
           a.generator == b.generator;
  }
};

Dataset generate_synthetic(const GeneratorSpec& spec, std::uint64_t seed);

inline constexpr std::uint16_t kDatasetVersion = 1;

/// "MLKD" | u16 version | u32 header length | JSON header | f32 inputs | u16 labels
std::string serialize_dataset(const Dataset& ds);
Dataset deserialize_dataset(const std::string& bytes);
void save_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

/// Stratified, disjoint, exhaustive split. Each part keeps the original order.
std::vector<Dataset> split(const Dataset& ds, std::span<const double> fractions, std::uint64_t seed);

/// Per-class selection of round(fraction * class count) samples, uniformly
/// without replacement; original order preserved.
std::vector<std::size_t> stratified_sample(const Dataset& ds, double fraction, std::uint64_t seed);

}  // namespace mlkd
