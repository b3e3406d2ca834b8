// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <cmath>
#include <map>
#include <set>

#include "mlkd/data.hpp"
#include "mlkd/error.hpp"
#include "mlkd/evaluation.hpp"

using namespace mlkd;

namespace {

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an mlkd::Error");
  return ErrorKind::contract;
}

GeneratorSpec blobs(std::size_t per_class = 10) {
  GeneratorSpec s;
  s.samples_per_class = per_class;
  s.input_dim = 8;
  return s;
}

std::multiset<std::vector<double>> row_multiset(const Dataset& ds) {
  std::multiset<std::vector<double>> out;
  for (std::size_t r = 0; r < ds.size(); ++r) {
    std::vector<double> row(ds.inputs.row(r).begin(), ds.inputs.row(r).end());
    row.push_back(ds.labels[r]);
    out.insert(std::move(row));
  }
  return out;
}

}  // namespace

TEST_CASE("generation is deterministic with exact class counts") {
  for (const char* family : {"clusters", "bars"}) {
    CAPTURE(family);
    GeneratorSpec spec = blobs(12);
    spec.family = family;
    spec.warp = true;
    const Dataset a = generate_synthetic(spec, 4), b = generate_synthetic(spec, 4);
    CHECK(serialize_dataset(a) == serialize_dataset(b));
    CHECK(a.size() == 120);
    for (std::size_t c : a.class_counts()) CHECK(c == 12);
    CHECK(serialize_dataset(generate_synthetic(spec, 5)) != serialize_dataset(a));
  }
  const Dataset img = generate_synthetic(GeneratorSpec{"bars", 4, 3, 8, 12, 1.0, 0.1, false, 1}, 0);
  CHECK(img.is_image());
  CHECK(img.sample_shape() == Shape{1, 12, 12});
  CHECK(img.size() == 12);
  // Inputs are stored as f32 in the container, so generated values must already be f32-exact.
  for (double v : img.inputs.values()) CHECK(static_cast<double>(static_cast<float>(v)) == v);
}

TEST_CASE("generator errors") {
  GeneratorSpec spec = blobs();
  spec.num_classes = 1;
  CHECK(kind_of([&] { generate_synthetic(spec, 0); }) == ErrorKind::spec);
  spec = blobs();
  spec.family = "spirals";
  CHECK(kind_of([&] { generate_synthetic(spec, 0); }) == ErrorKind::spec);
  spec = blobs();
  spec.modes_per_class = 0;
  CHECK(kind_of([&] { generate_synthetic(spec, 0); }) == ErrorKind::spec);
  CHECK(kind_of([] { nlohmann::json{{"family", "clusters"}, {"colour", 1}}.get<GeneratorSpec>(); }) ==
        ErrorKind::config);
}

TEST_CASE("well separated clusters are linearly separable") {
  GeneratorSpec spec = blobs(100);
  spec.spread = 5.0;
  spec.noise = 0.2;
  const Dataset ds = generate_synthetic(spec, 1);
  const auto parts = split(ds, std::vector<double>{0.8, 0.2}, 2);
  const double acc = linear_probe(parts[0].inputs, parts[0].labels, parts[1].inputs, parts[1].labels);
  CHECK(acc > 0.99);
}

TEST_CASE("cluster statistics match the noise level") {
  GeneratorSpec spec = blobs(2000);
  spec.num_classes = 2;
  spec.noise = 0.5;
  const Dataset ds = generate_synthetic(spec, 3);
  for (int cls = 0; cls < 2; ++cls) {
    std::vector<double> mean(spec.input_dim, 0.0), sq(spec.input_dim, 0.0);
    double n = 0.0;
    for (std::size_t r = 0; r < ds.size(); ++r) {
      if (ds.labels[r] != cls) continue;
      n += 1.0;
      for (std::size_t j = 0; j < spec.input_dim; ++j) {
        mean[j] += ds.inputs.at(r, j);
        sq[j] += ds.inputs.at(r, j) * ds.inputs.at(r, j);
      }
    }
    for (std::size_t j = 0; j < spec.input_dim; ++j) {
      const double m = mean[j] / n;
      const double sd = std::sqrt(sq[j] / n - m * m);
      CHECK(std::abs(sd - 0.5) < 0.05);
    }
  }
}

TEST_CASE("container round trip and corruption") {
  const Dataset ds = generate_synthetic(blobs(), 2);
  const std::string bytes = serialize_dataset(ds);
  CHECK(bytes.substr(0, 4) == "MLKD");
  CHECK(deserialize_dataset(bytes) == ds);

  const auto path = std::filesystem::temp_directory_path() / "mlkd_test_ds.bin";
  save_dataset(ds, path);
  CHECK(load_dataset(path) == ds);
  std::filesystem::remove(path);

  std::string bad = bytes;
  bad[1] = 'Z';
  try {
    deserialize_dataset(bad);
    FAIL("expected format error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::format);
    CHECK(std::string(e.what()).find("offset") != std::string::npos);
  }
  for (std::size_t cut = 0; cut < bytes.size(); cut += std::max<std::size_t>(1, bytes.size() / 97)) {
    CAPTURE(cut);
    CHECK(kind_of([&] { deserialize_dataset(bytes.substr(0, cut)); }) == ErrorKind::format);
  }
  CHECK(kind_of([&] { deserialize_dataset(bytes.substr(0, bytes.size() - 1)); }) == ErrorKind::format);
  CHECK(kind_of([&] { deserialize_dataset(bytes + "zz"); }) == ErrorKind::format);
}

TEST_CASE("stratified split") {
  const Dataset ds = generate_synthetic(blobs(10), 0);
  const auto whole = split(ds, std::vector<double>{1.0}, 3);
  REQUIRE(whole.size() == 1);
  CHECK(whole[0] == ds);

  const auto parts = split(ds, std::vector<double>{0.8, 0.2}, 3);
  REQUIRE(parts.size() == 2);
  CHECK(parts[0].size() == 80);
  CHECK(parts[1].size() == 20);
  for (std::size_t c : parts[0].class_counts()) CHECK(c == 8);
  for (std::size_t c : parts[1].class_counts()) CHECK(c == 2);

  auto joined = row_multiset(parts[0]);
  for (const auto& r : row_multiset(parts[1])) joined.insert(r);
  CHECK(joined == row_multiset(ds));

  CHECK(serialize_dataset(split(ds, std::vector<double>{0.8, 0.2}, 3)[1]) == serialize_dataset(parts[1]));
  CHECK(kind_of([&] { split(ds, std::vector<double>{0.5, 0.4}, 0); }) == ErrorKind::split);
  CHECK(kind_of([&] { split(ds, std::vector<double>{0.95, 0.05}, 0); }) == ErrorKind::split);
}

TEST_CASE("stratified sampling") {
  const Dataset ds = generate_synthetic(blobs(10), 0);
  const auto half = stratified_sample(ds, 0.5, 1);
  CHECK(half.size() == 50);
  CHECK(stratified_sample(ds, 0.5, 1) == half);
  std::map<int, int> per;
  for (std::size_t i : half) ++per[ds.labels[i]];
  for (const auto& [c, n] : per) CHECK(n == 5);
  const auto all = stratified_sample(ds, 1.0, 9);
  for (std::size_t i = 0; i < all.size(); ++i) CHECK(all[i] == i);
  CHECK(kind_of([&] { stratified_sample(ds, 0.0, 0); }) == ErrorKind::subsample);
  CHECK(kind_of([&] { stratified_sample(ds, 0.01, 0); }) == ErrorKind::subsample);
}
