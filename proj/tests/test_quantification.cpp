// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "mlkd/error.hpp"
#include "mlkd/ops.hpp"
#include "mlkd/quantification.hpp"
#include "oracles.hpp"

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

EntropyMap map_with_mask(std::vector<std::uint8_t> mask) {
  EntropyMap m = entropy_map_from_sigma(Tensor::filled({mask.size()}, 1.0));
  m.concept_mask = std::move(mask);
  return m;
}

}  // namespace

TEST_CASE("entropy map formula") {
  const EntropyMap unit = entropy_map_from_sigma(Tensor::filled({1, 3, 3}, 1.0));
  for (double h : unit.entropy.values()) CHECK(std::abs(h - kGaussianEntropyConstant) < 1e-15);
  CHECK(kGaussianEntropyConstant == doctest::Approx(0.5 * std::log(2.0 * M_PI * M_E)));
  for (auto flag : unit.concept_mask) CHECK(flag == 0);

  const EntropyMap two = entropy_map_from_sigma(
      Tensor::vector({std::exp(-kGaussianEntropyConstant), std::exp(2.0 - kGaussianEntropyConstant)}));
  CHECK(std::abs(two.entropy[0]) < 1e-12);
  CHECK(std::abs(two.entropy[1] - 2.0) < 1e-12);
  CHECK(std::abs(average_entropy(two) - 1.0) < 1e-12);

  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.01, 3.0);
  Tensor sigma({20});
  for (double& s : sigma.values()) s = u(rng);
  const EntropyMap m = entropy_map_from_sigma(sigma);
  double mean = 0.0;
  for (std::size_t i = 0; i < 20; ++i) {
    CHECK(std::abs(m.entropy[i] - (std::log(sigma[i]) + kGaussianEntropyConstant)) < 1e-15);
    mean += m.entropy[i] / 20.0;
  }
  CHECK(std::abs(m.mean_entropy - mean) < 1e-12);
  for (std::size_t i = 0; i < 20; ++i) CHECK(m.concept_mask[i] == (m.mean_entropy > m.entropy[i] ? 1 : 0));
  CHECK(kind_of([] { entropy_map_from_sigma(Tensor::vector({1.0, 0.0})); }) == ErrorKind::parameter);
}

TEST_CASE("iou cases") {
  const EntropyMap a = map_with_mask({1, 1, 0, 0});
  const EntropyMap b = map_with_mask({1, 0, 1, 0});
  const EntropyMap c = map_with_mask({0, 0, 1, 1});
  CHECK(iou_consistency(a, a).iou == 1.0);
  CHECK(iou_consistency(a, c).iou == 0.0);
  CHECK(iou_consistency(a, b).iou == 1.0 / 3.0);
  CHECK(iou_consistency(b, a).iou == iou_consistency(a, b).iou);
  const std::vector<std::uint8_t> first_two{1, 1, 0, 0};
  CHECK(iou_consistency(a, b, first_two).iou == 0.5);
  const EntropyMap empty = map_with_mask({0, 0, 0, 0});
  const IouResult deg = iou_consistency(empty, empty);
  CHECK(deg.iou == 0.0);
  CHECK(deg.degenerate);
}

TEST_CASE("rotated maps line up with rotated images") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.1, 2.0);
  Tensor sigma({1, 4, 4});
  for (double& s : sigma.values()) s = u(rng);
  const EntropyMap m = entropy_map_from_sigma(sigma);
  CHECK(rotate_map(rotate_map(m, 1), 3).sigma == m.sigma);
  CHECK(iou_consistency(rotate_map(m, 2), rotate_map(m, 2)).iou == 1.0);
  CHECK(rotate_map(m, 1).mean_entropy == doctest::Approx(m.mean_entropy));
}

TEST_CASE("identity network sigma matches the grid oracle") {
  const FeatureFn identity = [](Tape&, Var x) { return x; };
  const Tensor image = Tensor::vector({0.0, 1.0});
  EntropyConfig cfg;
  cfg.steps = 3000;
  cfg.epsilon_fraction = 0.02;
  const EntropyMap m = estimate_pixel_entropy(identity, image, cfg);
  const double oracle_sigma = oracle::identity_sigma_grid(2, 0.02, cfg.beta);
  CHECK(std::abs(oracle_sigma - std::sqrt(0.01)) < 1e-4);
  for (double s : m.sigma.values()) CHECK(std::abs(s / oracle_sigma - 1.0) < 0.1);
  CHECK(estimate_pixel_entropy(identity, image, cfg).sigma == m.sigma);
}

TEST_CASE("entropy grows with the distortion budget") {
  const FeatureFn identity = [](Tape&, Var x) { return x; };
  const Tensor image = Tensor::vector({0.0, 1.0});
  EntropyConfig cfg;
  cfg.steps = 3000;
  double previous = -1e300;
  for (double eps : {0.02, 0.05, 0.1}) {
    cfg.epsilon_fraction = eps;
    const EntropyMap m = estimate_pixel_entropy(identity, image, cfg);
    double total = 0.0;
    for (double h : m.entropy.values()) total += h;
    CHECK(total >= previous);
    previous = total;
  }
}

TEST_CASE("insensitive network hits the sigma cap") {
  const FeatureFn constant = [](Tape& tape, Var x) {
    return add_bias(scale(x, 0.0), tape.constant(Tensor::vector({1.0, 1.0})));
  };
  EntropyConfig cfg;
  cfg.steps = 6000;
  cfg.step_size = 0.05;
  const EntropyMap m = estimate_pixel_entropy(constant, Tensor::vector({0.0, 1.0}), cfg);
  for (double s : m.sigma.values()) CHECK(s == doctest::Approx(5.0).epsilon(1e-9));
  CHECK(m.converged);
  for (auto flag : m.concept_mask) CHECK(flag == 0);
}

TEST_CASE("entropy config validation") {
  EntropyConfig cfg;
  cfg.beta = 0.0;
  CHECK(kind_of([&] { cfg.validate(); }) == ErrorKind::parameter);
  cfg = EntropyConfig{};
  cfg.cap_fraction = 0.05;
  CHECK(kind_of([&] { cfg.validate(); }) == ErrorKind::parameter);
  CHECK(kind_of([] { nlohmann::json{{"stepz", 3}}.get<EntropyConfig>(); }) == ErrorKind::config);
  const FeatureFn identity = [](Tape&, Var x) { return x; };
  CHECK(kind_of([&] { estimate_pixel_entropy(identity, Tensor::vector({0.0, NAN}), EntropyConfig{}); }) ==
        ErrorKind::parameter);
}

TEST_CASE("csv export") {
  const std::string csv = entropy_map_csv(entropy_map_from_sigma(Tensor::vector({1.0, 2.0})));
  CHECK(csv.rfind("pixel,sigma,entropy,concept\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
}
