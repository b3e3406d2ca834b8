// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mlkd/autograd.hpp"
#include "mlkd/rng.hpp"
#include "mlkd/tensor.hpp"

namespace mlkd {

/// Layer widths of a multilayer perceptron. `widths.back()` is the feature
/// dimension; every layer but the last is followed by a ReLU.
struct ArchSpec {
  Shape input_shape;  // per-sample shape, e.g. {32} or {1, 12, 12}
  std::vector<std::size_t> widths;
  std::optional<std::size_t> num_classes;

  std::size_t input_dim() const { return shape_size(input_shape); }
  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

void to_json(nlohmann::json& j, const ArchSpec& a);
void from_json(const nlohmann::json& j, ArchSpec& a);

/// Affine map x -> x W + b with W stored in x in-by-out layout.
struct Dense {
  Tensor weight;
  Tensor bias;
};

Dense make_dense(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng);
/// x W + b
Tensor forward(const Dense& layer, const Tensor& x);

class Network {
 public:
  ArchSpec arch;
  std::vector<Dense> layers;
  std::optional<Dense> projection;

  std::size_t feature_dim() const { return arch.widths.back(); }
  bool has_projection() const { return projection.has_value(); }
  std::size_t num_classes() const;
};

Network init_network(const ArchSpec& arch, std::uint64_t seed);

Tensor forward_features(const Network& net, const Tensor& batch);
Tensor forward_logits(const Network& net, const Tensor& features);

/// Student-to-teacher map: Dense -> ReLU -> Dense.
struct TransformHead {
  Dense hidden;
  Dense output;

  std::size_t input_dim() const { return hidden.weight.dim(0); }
  std::size_t hidden_dim() const { return hidden.weight.dim(1); }
  std::size_t output_dim() const { return output.weight.dim(1); }
};

/// hidden width = round(multiplier * teacher_dim); 16 is the default width
/// ratio for alignment heads.
TransformHead make_transform_head(std::size_t student_dim, std::size_t teacher_dim, double multiplier,
                                  std::uint64_t seed);
TransformHead make_mlp_head(std::size_t in_dim, std::size_t hidden_dim, std::size_t out_dim, std::uint64_t seed);

Tensor apply_head(const TransformHead& head, const Tensor& z);

// ---- Tape bindings ----------------------------------------------------------

struct BoundDense {
  Var weight;
  Var bias;
};

Var forward(const BoundDense& layer, Var x);

struct BoundNetwork {
  std::vector<BoundDense> layers;
  std::optional<BoundDense> projection;
};

struct BoundHead {
  BoundDense hidden;
  BoundDense output;
};

/// Registers the parameters on the tape; trainable ones become leaves.
BoundNetwork bind(Tape& tape, const Network& net, bool trainable);
BoundDense bind(Tape& tape, const Dense& layer, bool trainable);
BoundHead bind(Tape& tape, const TransformHead& head, bool trainable);

Var forward_features(const BoundNetwork& net, Var batch);
Var forward_logits(const BoundNetwork& net, Var features);
Var apply_head(const BoundHead& head, Var z);

/// Parameter tensors in declaration order (layers, projection).
std::vector<Tensor*> parameters(Network& net);
std::vector<Tensor*> parameters(TransformHead& head);
std::vector<Tensor*> parameters(Dense& layer);
std::vector<Var> parameters(const BoundNetwork& net);
std::vector<Var> parameters(const BoundHead& head);
std::vector<Var> parameters(const BoundDense& layer);

// ---- Checkpoints ------------------------------------------------------------

struct Checkpoint {
  Network network;
  std::optional<TransformHead> head;
  std::uint64_t seed = 0;
  std::size_t epochs = 0;
};

inline constexpr std::uint16_t kCheckpointVersion = 1;

/// "MLKD" | u16 version | u32 descriptor length | JSON descriptor | f64 params.
std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace mlkd
