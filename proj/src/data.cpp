// SPDX-License-Identifier: Apache-2.0
#include "mlkd/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "binary_io.hpp"
#include "mlkd/error.hpp"
#include "mlkd/rng.hpp"

namespace mlkd {

void to_json(nlohmann::json& j, const GeneratorSpec& s) {
  j = nlohmann::json{{"family", s.family},         {"num_classes", s.num_classes},
                     {"samples_per_class", s.samples_per_class}, {"input_dim", s.input_dim},
                     {"image_size", s.image_size}, {"spread", s.spread},
                     {"noise", s.noise},           {"warp", s.warp},
                     {"modes_per_class", s.modes_per_class}};
}

void from_json(const nlohmann::json& j, GeneratorSpec& s) {
  GeneratorSpec out;
  for (const auto& [key, value] : j.items()) {
    if (key == "family") out.family = value.get<std::string>();
    else if (key == "num_classes") out.num_classes = value.get<std::size_t>();
    else if (key == "samples_per_class") out.samples_per_class = value.get<std::size_t>();
    else if (key == "input_dim") out.input_dim = value.get<std::size_t>();
    else if (key == "image_size") out.image_size = value.get<std::size_t>();
    else if (key == "spread") out.spread = value.get<double>();
    else if (key == "noise") out.noise = value.get<double>();
    else if (key == "warp") out.warp = value.get<bool>();
    else if (key == "modes_per_class") out.modes_per_class = value.get<std::size_t>();
    else fail(ErrorKind::config, "unknown generator key '" + key + "'");
  }
  s = out;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.inputs = gather_rows(inputs, indices);
  if (has_labels()) {
    out.labels.reserve(indices.size());
    for (auto i : indices) out.labels.push_back(labels[i]);
  }
  out.num_classes = num_classes;
  out.generator = generator;
  return out;
}

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(std::max<std::size_t>(num_classes, 1), 0);
  if (!has_labels()) {
    counts[0] = size();
    return counts;
  }
  for (int y : labels) ++counts[static_cast<std::size_t>(y)];
  return counts;
}

void Dataset::validate() const {
  if (inputs.empty() || inputs.rank() < 2) fail(ErrorKind::data, "dataset needs at least one sample");
  if (has_labels()) {
    if (labels.size() != inputs.rows()) fail(ErrorKind::data, "label count does not match sample count");
    for (int y : labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
        fail(ErrorKind::label, "label " + std::to_string(y) + " outside [0, " + std::to_string(num_classes) + ")");
      }
    }
  }
}

namespace {

double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

Dataset generate_clusters(const GeneratorSpec& spec, std::uint64_t seed) {
  const std::size_t k = spec.num_classes;
  const std::size_t d = spec.input_dim;
  const std::size_t n = k * spec.samples_per_class;
  Rng center_rng(derive_seed(seed, "centers"));
  Rng sample_rng(derive_seed(seed, "samples"));
  std::normal_distribution<double> normal(0.0, 1.0);

  const std::size_t modes = spec.modes_per_class;
  std::vector<double> centers(k * modes * d);
  for (double& c : centers) c = spec.spread * normal(center_rng);

  Dataset ds;
  ds.inputs = Tensor({n, d});
  ds.labels.resize(n);
  ds.num_classes = k;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t y = i % k;
    const std::size_t mode = (i / k) % modes;
    ds.labels[i] = static_cast<int>(y);
    auto row = ds.inputs.row(i);
    const double* center = centers.data() + (y * modes + mode) * d;
    for (std::size_t f = 0; f < d; ++f) row[f] = center[f] + spec.noise * normal(sample_rng);
  }

  if (spec.warp) {
    // x <- x + spread * tanh(x A + c) B with a fixed random residual map.
    const std::size_t hidden = 2 * d;
    Rng warp_rng(derive_seed(seed, "warp"));
    Tensor a({d, hidden});
    Tensor b({hidden, d});
    Tensor c({hidden});
    const double scale_a = 1.0 / (std::max(spec.spread, 1e-12) * std::sqrt(static_cast<double>(d)));
    for (double& v : a.values()) v = normal(warp_rng) * scale_a * 2.0;
    for (double& v : b.values()) v = normal(warp_rng) / std::sqrt(static_cast<double>(hidden));
    std::uniform_real_distribution<double> offset(-1.0, 1.0);
    for (double& v : c.values()) v = offset(warp_rng);
    RowMatrix h = ds.inputs.matrix() * a.matrix();
    h.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(c.values().data(), Eigen::Index(hidden));
    h = h.array().tanh().matrix();
    ds.inputs.matrix() += 2.0 * spec.spread * (h * b.matrix());
  }
  for (double& v : ds.inputs.values()) v = to_f32(v);
  return ds;
}

Dataset generate_bars(const GeneratorSpec& spec, std::uint64_t seed) {
  const std::size_t k = spec.num_classes;
  const std::size_t s = spec.image_size;
  const std::size_t n = k * spec.samples_per_class;
  if (s < 4) fail(ErrorKind::spec, "bar images need image_size >= 4");
  const std::size_t angles = (k + 1) / 2;
  const double periods[2] = {3.0, 5.0};

  Rng rng(derive_seed(seed, "bars"));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);

  Dataset ds;
  ds.inputs = Tensor({n, 1, s, s});
  ds.labels.resize(n);
  ds.num_classes = k;
  const double centre = (static_cast<double>(s) - 1.0) / 2.0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t y = i % k;
    ds.labels[i] = static_cast<int>(y);
    const double theta = std::numbers::pi / 2.0 * static_cast<double>(y % angles) / static_cast<double>(angles);
    const double period = periods[(y / angles) % 2];
    const double phi[2] = {phase(rng), phase(rng)};
    auto img = ds.inputs.row(i);
    for (std::size_t r = 0; r < s; ++r) {
      for (std::size_t c = 0; c < s; ++c) {
        const double px = static_cast<double>(c) - centre;
        const double py = static_cast<double>(r) - centre;
        double v = 0.0;
        for (int fam = 0; fam < 2; ++fam) {
          const double t = theta + fam * std::numbers::pi / 2.0;
          const double u = px * std::cos(t) + py * std::sin(t);
          v = std::max(v, std::pow(0.5 * (1.0 + std::cos(2.0 * std::numbers::pi * u / period + phi[fam])), 4.0));
        }
        img[r * s + c] = spec.spread * v + spec.noise * normal(rng);
      }
    }
  }
  for (double& v : ds.inputs.values()) v = to_f32(v);
  return ds;
}

}  // namespace

Dataset generate_synthetic(const GeneratorSpec& spec, std::uint64_t seed) {
  if (spec.num_classes < 2) fail(ErrorKind::spec, "synthetic data needs K >= 2 classes");
  if (spec.samples_per_class == 0) fail(ErrorKind::spec, "samples_per_class must be positive");
  if (spec.num_classes > 65535) fail(ErrorKind::spec, "class ids must fit in u16");
  Dataset ds;
  if (spec.family == "clusters") {
    if (spec.input_dim == 0) fail(ErrorKind::spec, "input_dim must be positive");
    if (spec.modes_per_class == 0) fail(ErrorKind::spec, "modes_per_class must be positive");
    ds = generate_clusters(spec, seed);
  } else if (spec.family == "bars") {
    ds = generate_bars(spec, seed);
  } else {
    fail(ErrorKind::spec, "unknown generator family '" + spec.family + "'");
  }
  ds.generator = spec;
  ds.generator["seed"] = seed;
  return ds;
}

// ---- Container ----------------------------------------------------------------

std::string serialize_dataset(const Dataset& ds) {
  ds.validate();
  const nlohmann::json header = {{"dtype", "f32"},
                                 {"shape", ds.inputs.shape()},
                                 {"labels_present", ds.has_labels()},
                                 {"K", ds.num_classes},
                                 {"generator", ds.generator}};
  const std::string text = header.dump();
  detail::ByteWriter out;
  out.raw("MLKD");
  out.u16(kDatasetVersion);
  out.u32(static_cast<std::uint32_t>(text.size()));
  out.raw(text);
  for (double v : ds.inputs.values()) out.f32(static_cast<float>(v));
  for (int y : ds.labels) out.u16(static_cast<std::uint16_t>(y));
  return out.bytes();
}

Dataset deserialize_dataset(const std::string& bytes) {
  detail::ByteReader in(bytes);
  if (in.raw(4, "magic") != "MLKD") fail(ErrorKind::format, "bad dataset magic at byte offset 0");
  const auto version = in.u16("version");
  if (version != kDatasetVersion) {
    fail(ErrorKind::format, "unsupported dataset version " + std::to_string(version) + " at byte offset 4");
  }
  const auto length = in.u32("header length");
  const std::size_t header_offset = in.offset();
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(in.raw(length, "header"));
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::format, "malformed dataset header at byte offset " + std::to_string(header_offset) + ": " + e.what());
  }

  Shape shape;
  bool labels_present = false;
  std::size_t k = 0;
  try {
    if (header.at("dtype").get<std::string>() != "f32") fail(ErrorKind::format, "unsupported dtype in dataset header");
    shape = header.at("shape").get<Shape>();
    labels_present = header.at("labels_present").get<bool>();
    k = header.at("K").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, std::string("invalid dataset header: ") + e.what());
  }
  if (shape.size() < 2 || std::find(shape.begin(), shape.end(), 0) != shape.end()) {
    fail(ErrorKind::format, "dataset header has an invalid shape " + shape_string(shape));
  }
  // Size check happens before any allocation.
  const std::size_t count = shape_size(shape);
  const std::size_t n = shape[0];
  const std::size_t expected = count * 4 + (labels_present ? n * 2 : 0);
  if (in.remaining() != expected) {
    fail(ErrorKind::format, "dataset payload at byte offset " + std::to_string(in.offset()) + " holds " +
                                std::to_string(in.remaining()) + " bytes, header requires " + std::to_string(expected));
  }

  Dataset ds;
  std::vector<double> values(count);
  for (double& v : values) v = static_cast<double>(in.f32("inputs"));
  ds.inputs = Tensor(shape, std::move(values));
  if (labels_present) {
    ds.labels.resize(n);
    for (int& y : ds.labels) y = in.u16("labels");
  }
  ds.num_classes = k;
  ds.generator = header.value("generator", nlohmann::json::object());
  ds.validate();
  return ds;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  detail::write_file(path, serialize_dataset(ds));
}

Dataset load_dataset(const std::filesystem::path& path) { return deserialize_dataset(detail::read_file(path)); }

// ---- Splits -------------------------------------------------------------------

namespace {

std::vector<std::vector<std::size_t>> indices_by_class(const Dataset& ds) {
  std::vector<std::vector<std::size_t>> groups(std::max<std::size_t>(ds.num_classes, 1));
  for (std::size_t i = 0; i < ds.size(); ++i) {
    groups[ds.has_labels() ? static_cast<std::size_t>(ds.labels[i]) : 0].push_back(i);
  }
  return groups;
}

}  // namespace

std::vector<Dataset> split(const Dataset& ds, std::span<const double> fractions, std::uint64_t seed) {
  if (fractions.empty()) fail(ErrorKind::split, "split needs at least one fraction");
  double total = 0.0;
  for (double f : fractions) {
    if (!(f > 0.0)) fail(ErrorKind::split, "split fractions must be positive");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) fail(ErrorKind::split, "split fractions must sum to 1");

  const std::size_t parts = fractions.size();
  std::vector<std::vector<std::size_t>> chosen(parts);
  auto groups = indices_by_class(ds);
  for (std::size_t c = 0; c < groups.size(); ++c) {
    auto& members = groups[c];
    if (members.empty()) continue;
    Rng rng(derive_seed(seed, "split", c));
    std::shuffle(members.begin(), members.end(), rng);

    // Largest-remainder apportionment of the class over the parts.
    const double n = static_cast<double>(members.size());
    std::vector<std::size_t> counts(parts);
    std::vector<std::pair<double, std::size_t>> remainders;
    std::size_t assigned = 0;
    for (std::size_t p = 0; p < parts; ++p) {
      const double exact = n * fractions[p];
      counts[p] = static_cast<std::size_t>(std::floor(exact + 1e-9));
      assigned += counts[p];
      remainders.emplace_back(exact - static_cast<double>(counts[p]), p);
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t r = 0; assigned < members.size(); ++r, ++assigned) ++counts[remainders[r % parts].second];

    std::size_t offset = 0;
    for (std::size_t p = 0; p < parts; ++p) {
      if (counts[p] == 0) {
        fail(ErrorKind::split, "split part " + std::to_string(p) + " would have no samples of class " + std::to_string(c));
      }
      chosen[p].insert(chosen[p].end(), members.begin() + offset, members.begin() + offset + counts[p]);
      offset += counts[p];
    }
  }

  std::vector<Dataset> out;
  for (auto& idx : chosen) {
    std::sort(idx.begin(), idx.end());
    out.push_back(ds.subset(idx));
  }
  return out;
}

std::vector<std::size_t> stratified_sample(const Dataset& ds, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    fail(ErrorKind::subsample, "fraction must lie in (0, 1], got " + std::to_string(fraction));
  }
  std::vector<std::size_t> chosen;
  auto groups = indices_by_class(ds);
  for (std::size_t c = 0; c < groups.size(); ++c) {
    auto& members = groups[c];
    if (members.empty()) continue;
    const auto keep = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(members.size())));
    if (keep == 0) {
      fail(ErrorKind::subsample, "fraction " + std::to_string(fraction) + " leaves class " + std::to_string(c) + " empty");
    }
    Rng rng(derive_seed(seed, "subsample", c));
    std::shuffle(members.begin(), members.end(), rng);
    chosen.insert(chosen.end(), members.begin(), members.begin() + keep);
  }
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

}  // namespace mlkd
