// SPDX-License-Identifier: Apache-2.0
#include "mlkd/network.hpp"

#include <cmath>

#include "binary_io.hpp"
#include "mlkd/error.hpp"
#include "mlkd/ops.hpp"

namespace mlkd {

void to_json(nlohmann::json& j, const ArchSpec& a) {
  j = nlohmann::json{{"input_shape", a.input_shape}, {"widths", a.widths}};
  j["num_classes"] = a.num_classes ? nlohmann::json(*a.num_classes) : nlohmann::json(nullptr);
}

void from_json(const nlohmann::json& j, ArchSpec& a) {
  for (const auto& [key, _] : j.items()) {
    if (key != "input_shape" && key != "widths" && key != "num_classes") {
      fail(ErrorKind::config, "unknown architecture key '" + key + "'");
    }
  }
  a.input_shape = j.at("input_shape").get<Shape>();
  a.widths = j.at("widths").get<std::vector<std::size_t>>();
  if (j.contains("num_classes") && !j["num_classes"].is_null()) {
    a.num_classes = j["num_classes"].get<std::size_t>();
  } else {
    a.num_classes.reset();
  }
}

Dense make_dense(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Dense d{Tensor({fan_in, fan_out}), Tensor({fan_out})};
  for (double& w : d.weight.values()) w = dist(rng);
  return d;
}

std::size_t Network::num_classes() const {
  if (!projection) fail(ErrorKind::capability, "network has no classification projection (feature-only)");
  return projection->weight.dim(1);
}

Network init_network(const ArchSpec& arch, std::uint64_t seed) {
  if (arch.widths.empty()) fail(ErrorKind::spec, "architecture has an empty layer list");
  if (arch.input_shape.empty() || arch.input_dim() == 0) fail(ErrorKind::spec, "architecture has no input shape");
  for (auto w : arch.widths) {
    if (w == 0) fail(ErrorKind::spec, "architecture has a zero-width layer");
  }
  if (arch.num_classes && *arch.num_classes < 1) fail(ErrorKind::spec, "class count must be positive");

  Rng rng(seed);
  Network net;
  net.arch = arch;
  std::size_t fan_in = arch.input_dim();
  for (auto width : arch.widths) {
    net.layers.push_back(make_dense(fan_in, width, rng));
    fan_in = width;
  }
  if (arch.num_classes) net.projection = make_dense(fan_in, *arch.num_classes, rng);
  return net;
}

Tensor forward(const Dense& d, const Tensor& x) {
  Tensor out = matmul(x, d.weight);
  auto bias = Eigen::Map<const Eigen::RowVectorXd>(d.bias.values().data(), Eigen::Index(d.bias.size()));
  out.matrix().rowwise() += bias;
  return out;
}

namespace {

void relu_inplace(Tensor& t) {
  for (double& v : t.values()) v = v > 0.0 ? v : 0.0;
}

}  // namespace

Tensor forward_features(const Network& net, const Tensor& batch) {
  if (batch.rank() < 2 || batch.cols() != net.arch.input_dim()) {
    fail(ErrorKind::shape, "forward_features: batch " + shape_string(batch.shape()) + " vs declared input " +
                               shape_string(net.arch.input_shape));
  }
  Tensor h = batch.flattened();
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    h = forward(net.layers[i], h);
    if (i + 1 < net.layers.size()) relu_inplace(h);
  }
  return h;
}

Tensor forward_logits(const Network& net, const Tensor& features) {
  if (!net.projection) fail(ErrorKind::capability, "forward_logits: feature-only network has no projection");
  if (features.rank() != 2 || features.cols() != net.feature_dim()) {
    fail(ErrorKind::shape, "forward_logits: features " + shape_string(features.shape()) + " vs feature dim " +
                               std::to_string(net.feature_dim()));
  }
  return forward(*net.projection, features);
}

TransformHead make_mlp_head(std::size_t in_dim, std::size_t hidden_dim, std::size_t out_dim, std::uint64_t seed) {
  if (in_dim == 0 || hidden_dim == 0 || out_dim == 0) fail(ErrorKind::parameter, "head dimensions must be >= 1");
  Rng rng(seed);
  TransformHead head;
  head.hidden = make_dense(in_dim, hidden_dim, rng);
  head.output = make_dense(hidden_dim, out_dim, rng);
  return head;
}

TransformHead make_transform_head(std::size_t student_dim, std::size_t teacher_dim, double multiplier,
                                  std::uint64_t seed) {
  if (!(multiplier > 0.0) || !std::isfinite(multiplier)) {
    fail(ErrorKind::parameter, "transform head multiplier must be positive, got " + std::to_string(multiplier));
  }
  if (student_dim == 0 || teacher_dim == 0) fail(ErrorKind::parameter, "head dimensions must be >= 1");
  const auto hidden = static_cast<std::size_t>(std::llround(multiplier * static_cast<double>(teacher_dim)));
  if (hidden == 0) fail(ErrorKind::parameter, "transform head multiplier rounds to an empty hidden layer");
  return make_mlp_head(student_dim, hidden, teacher_dim, seed);
}

Tensor apply_head(const TransformHead& head, const Tensor& z) {
  if (z.rank() != 2 || z.cols() != head.input_dim()) {
    fail(ErrorKind::shape, "apply_head: input " + shape_string(z.shape()) + " vs head input " +
                               std::to_string(head.input_dim()));
  }
  Tensor h = forward(head.hidden, z);
  relu_inplace(h);
  return forward(head.output, h);
}

// ---- Tape bindings ----------------------------------------------------------

BoundDense bind(Tape& tape, const Dense& layer, bool trainable) {
  if (trainable) return {tape.leaf(layer.weight), tape.leaf(layer.bias)};
  return {tape.constant(layer.weight), tape.constant(layer.bias)};
}

BoundNetwork bind(Tape& tape, const Network& net, bool trainable) {
  BoundNetwork bound;
  for (const auto& layer : net.layers) bound.layers.push_back(bind(tape, layer, trainable));
  if (net.projection) bound.projection = bind(tape, *net.projection, trainable);
  return bound;
}

BoundHead bind(Tape& tape, const TransformHead& head, bool trainable) {
  return {bind(tape, head.hidden, trainable), bind(tape, head.output, trainable)};
}

Var forward(const BoundDense& layer, Var x) { return add_bias(matmul(x, layer.weight), layer.bias); }

Var forward_features(const BoundNetwork& net, Var batch) {
  const Tensor& in = batch.value();
  const std::size_t expected = net.layers.front().weight.value().dim(0);
  if (in.rank() < 2 || in.cols() != expected) {
    fail(ErrorKind::shape, "forward_features: batch " + shape_string(in.shape()) + " vs input width " +
                               std::to_string(expected));
  }
  Var h = batch;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    h = forward(net.layers[i], h);
    if (i + 1 < net.layers.size()) h = relu(h);
  }
  return h;
}

Var forward_logits(const BoundNetwork& net, Var features) {
  if (!net.projection) fail(ErrorKind::capability, "forward_logits: feature-only network has no projection");
  return forward(*net.projection, features);
}

Var apply_head(const BoundHead& head, Var z) { return forward(head.output, relu(forward(head.hidden, z))); }

std::vector<Tensor*> parameters(Dense& layer) { return {&layer.weight, &layer.bias}; }

std::vector<Tensor*> parameters(Network& net) {
  std::vector<Tensor*> out;
  for (auto& layer : net.layers) {
    out.push_back(&layer.weight);
    out.push_back(&layer.bias);
  }
  if (net.projection) {
    out.push_back(&net.projection->weight);
    out.push_back(&net.projection->bias);
  }
  return out;
}

std::vector<Tensor*> parameters(TransformHead& head) {
  return {&head.hidden.weight, &head.hidden.bias, &head.output.weight, &head.output.bias};
}

std::vector<Var> parameters(const BoundDense& layer) { return {layer.weight, layer.bias}; }

std::vector<Var> parameters(const BoundNetwork& net) {
  std::vector<Var> out;
  for (const auto& layer : net.layers) {
    out.push_back(layer.weight);
    out.push_back(layer.bias);
  }
  if (net.projection) {
    out.push_back(net.projection->weight);
    out.push_back(net.projection->bias);
  }
  return out;
}

std::vector<Var> parameters(const BoundHead& head) {
  return {head.hidden.weight, head.hidden.bias, head.output.weight, head.output.bias};
}

// ---- Checkpoints ------------------------------------------------------------

namespace {

constexpr char kMagic[] = "MLKD";

void append_tensor(detail::ByteWriter& w, nlohmann::json& index, const std::string& name, const Tensor& t) {
  index.push_back({{"name", name}, {"shape", t.shape()}});
  for (double v : t.values()) w.f64(v);
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json tensors = nlohmann::json::array();
  detail::ByteWriter payload;
  const Network& net = ckpt.network;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    append_tensor(payload, tensors, "layers." + std::to_string(i) + ".weight", net.layers[i].weight);
    append_tensor(payload, tensors, "layers." + std::to_string(i) + ".bias", net.layers[i].bias);
  }
  if (net.projection) {
    append_tensor(payload, tensors, "projection.weight", net.projection->weight);
    append_tensor(payload, tensors, "projection.bias", net.projection->bias);
  }
  nlohmann::json head = nullptr;
  if (ckpt.head) {
    head = {{"input_dim", ckpt.head->input_dim()},
            {"hidden_dim", ckpt.head->hidden_dim()},
            {"output_dim", ckpt.head->output_dim()}};
    append_tensor(payload, tensors, "head.hidden.weight", ckpt.head->hidden.weight);
    append_tensor(payload, tensors, "head.hidden.bias", ckpt.head->hidden.bias);
    append_tensor(payload, tensors, "head.output.weight", ckpt.head->output.weight);
    append_tensor(payload, tensors, "head.output.bias", ckpt.head->output.bias);
  }
  const nlohmann::json descriptor = {{"kind", "checkpoint"}, {"arch", net.arch}, {"head", head},
                                     {"seed", ckpt.seed},    {"epochs", ckpt.epochs}, {"tensors", tensors}};
  const std::string text = descriptor.dump();

  detail::ByteWriter out;
  out.raw(std::string(kMagic, 4));
  out.u16(kCheckpointVersion);
  out.u32(static_cast<std::uint32_t>(text.size()));
  out.raw(text);
  out.raw(payload.bytes());
  return out.bytes();
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  detail::ByteReader in(bytes);
  if (in.raw(4, "magic") != std::string(kMagic, 4)) fail(ErrorKind::format, "bad checkpoint magic at byte offset 0");
  const auto version = in.u16("version");
  if (version != kCheckpointVersion) {
    fail(ErrorKind::format, "unsupported checkpoint version " + std::to_string(version) + " at byte offset 4");
  }
  const auto length = in.u32("descriptor length");
  const std::size_t descriptor_offset = in.offset();
  nlohmann::json descriptor;
  try {
    descriptor = nlohmann::json::parse(in.raw(length, "descriptor"));
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::format, "malformed checkpoint descriptor at byte offset " + std::to_string(descriptor_offset) +
                                ": " + e.what());
  }
  if (descriptor.value("kind", "") != "checkpoint") {
    fail(ErrorKind::format, "container at byte offset 0 is not a checkpoint");
  }

  Checkpoint ckpt;
  try {
    ckpt.network = init_network(descriptor.at("arch").get<ArchSpec>(), 0);
    ckpt.seed = descriptor.at("seed").get<std::uint64_t>();
    ckpt.epochs = descriptor.at("epochs").get<std::size_t>();
    const auto& head = descriptor.at("head");
    if (!head.is_null()) {
      ckpt.head = make_mlp_head(head.at("input_dim"), head.at("hidden_dim"), head.at("output_dim"), 0);
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, std::string("invalid checkpoint descriptor: ") + e.what());
  }

  std::vector<Tensor*> slots = parameters(ckpt.network);
  if (ckpt.head) {
    for (Tensor* t : parameters(*ckpt.head)) slots.push_back(t);
  }
  const auto& index = descriptor.at("tensors");
  if (index.size() != slots.size()) fail(ErrorKind::format, "checkpoint tensor count does not match architecture");
  std::size_t expected_bytes = 0;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (index[i].at("shape").get<Shape>() != slots[i]->shape()) {
      fail(ErrorKind::format, "checkpoint tensor '" + index[i].at("name").get<std::string>() + "' has wrong shape");
    }
    expected_bytes += slots[i]->size() * 8;
  }
  if (in.remaining() != expected_bytes) {
    fail(ErrorKind::format, "checkpoint payload at byte offset " + std::to_string(in.offset()) + " holds " +
                                std::to_string(in.remaining()) + " bytes, descriptor requires " +
                                std::to_string(expected_bytes));
  }
  for (Tensor* t : slots) {
    for (double& v : t->values()) v = in.f64("parameter");
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  detail::write_file(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(detail::read_file(path));
}

}  // namespace mlkd
