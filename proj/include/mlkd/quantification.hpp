// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mlkd/autograd.hpp"
#include "mlkd/data.hpp"
#include "mlkd/network.hpp"

namespace mlkd {

/// Settings for the perturbation entropy estimator. sigma = softplus(rho) is
/// learned by gradient ascent on
///   sum_i log sigma_i - beta * max(0, E||f(x + sigma * xi) - f(x)||^2 - eps)
/// with eps = epsilon_fraction * ||f(x)||^2.
struct EntropyConfig {
  std::size_t draws = 8;  // Monte-Carlo draws per step, rounded up to even
  std::size_t steps = 200;
  double beta = 100.0;
  double epsilon_fraction = 0.05;
  double step_size = 0.01;
  double init_fraction = 0.1;  // initial sigma as a multiple of the image std
  double cap_fraction = 10.0;  // sigma ceiling as a multiple of the image std
  std::uint64_t seed = 0;
  void validate() const;
};

void to_json(nlohmann::json& j, const EntropyConfig& c);
void from_json(const nlohmann::json& j, EntropyConfig& c);

struct EntropyMap {
  Tensor entropy;  // H_i = log sigma_i + 0.5 log(2 pi e), same shape as the input sample
  Tensor sigma;
  double mean_entropy = 0.0;
  std::vector<std::uint8_t> concept_mask;  // mean_entropy > H_i
  bool converged = true;
  double violation = 0.0;  // max(0, distortion - eps) at the final sigma
  double epsilon = 0.0;
};

/// Maps a batch of flattened inputs (rows) to features on a tape.
using FeatureFn = std::function<Var(Tape&, Var)>;

inline constexpr double kGaussianEntropyConstant = 1.4189385332046727;  // 0.5 log(2 pi e)

EntropyMap entropy_map_from_sigma(const Tensor& sigma);
double average_entropy(const EntropyMap& map);

EntropyMap estimate_pixel_entropy(const FeatureFn& f, const Tensor& image, const EntropyConfig& config = {});
EntropyMap estimate_pixel_entropy(const Network& net, const Tensor& image, const EntropyConfig& config = {});

/// Rotates a C x H x W map by k counter-clockwise quarter turns.
EntropyMap rotate_map(const EntropyMap& map, int quarter_turns);

struct IouResult {
  double iou = 0.0;
  bool degenerate = false;  // empty union inside the overlap
};

IouResult iou_masks(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b,
                    std::span<const std::uint8_t> overlap);
IouResult iou_consistency(const EntropyMap& a, const EntropyMap& b, std::span<const std::uint8_t> overlap);
/// Full overlap.
IouResult iou_consistency(const EntropyMap& a, const EntropyMap& b);

struct ImageQuantification {
  std::size_t index = 0;
  int turns_a = 0;
  int turns_b = 0;
  double mean_entropy = 0.0;  // of the first view, in the original frame
  IouResult iou;
  bool converged = true;
};

struct QuantifyReport {
  std::vector<ImageQuantification> images;
  double mean_entropy = 0.0;
  double mean_iou = 0.0;
  std::size_t degenerate = 0;
  std::size_t unconverged = 0;
};

void to_json(nlohmann::json& j, const QuantifyReport& r);

/// For the first `count` images: entropy maps on two distinct rotations,
/// rotated back to the original frame, compared by IoU.
QuantifyReport quantify_dataset(const Network& net, const Dataset& images, std::size_t count,
                                const EntropyConfig& config = {});

/// CSV with header pixel,sigma,entropy,concept.
std::string entropy_map_csv(const EntropyMap& map);
void save_entropy_map_csv(const EntropyMap& map, const std::filesystem::path& path);

}  // namespace mlkd
