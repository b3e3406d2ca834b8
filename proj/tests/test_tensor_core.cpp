// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <random>

#include "mlkd/autograd.hpp"
#include "mlkd/error.hpp"
#include "mlkd/gradcheck.hpp"
#include "mlkd/ops.hpp"
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

}  // namespace

TEST_CASE("tensor shape contract") {
  Tensor t({2, 3});
  CHECK(t.size() == 6);
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK(kind_of([] { Tensor({2, 0}); }) == ErrorKind::shape);
  CHECK(kind_of([] { Tensor({2, 2}, {1.0, 2.0, 3.0}); }) == ErrorKind::shape);
  Tensor img({2, 1, 3, 3});
  CHECK(img.cols() == 9);
  CHECK(img.flattened().shape() == Shape{2, 9});
}

TEST_CASE("grad of sum of squares and of a constant") {
  const ScalarFn sq = [](Tape&, std::span<const Var> p) { return sum(mul(p[0], p[0])); };
  const std::vector<Tensor> x{Tensor::vector({1.0, 2.0})};
  const auto g = grad(sq, x);
  CHECK(g[0][0] == doctest::Approx(2.0));
  CHECK(g[0][1] == doctest::Approx(4.0));

  const ScalarFn constant = [](Tape& t, std::span<const Var>) { return t.constant(Tensor::scalar(3.0)); };
  const auto gc = grad(constant, x);
  CHECK(gc[0][0] == 0.0);
  CHECK(gc[0][1] == 0.0);
}

TEST_CASE("grad rejects non-scalar output and names non-finite ops") {
  const ScalarFn vec = [](Tape&, std::span<const Var> p) { return p[0]; };
  const std::vector<Tensor> x{Tensor::vector({1.0, 2.0})};
  CHECK(kind_of([&] { grad(vec, x); }) == ErrorKind::contract);

  const ScalarFn overflow = [](Tape&, std::span<const Var> p) { return sum(scale(p[0], 1e308 * 10.0)); };
  try {
    grad(overflow, x);
    FAIL("expected numeric error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::numeric);
    CHECK(std::string(e.what()).find("scale") != std::string::npos);
  }
}

TEST_CASE("tape is single use") {
  Tape tape;
  Var x = tape.leaf(Tensor::scalar(2.0));
  Var y = mul(x, x);
  tape.backward(y);
  CHECK(tape.grad(x).item() == doctest::Approx(4.0));
  CHECK(kind_of([&] { tape.backward(y); }) == ErrorKind::contract);
}

TEST_CASE("gradient is linear") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 5; ++trial) {
    const std::vector<Tensor> p{oracle::random_matrix(3, 4, rng)};
    const ScalarFn f = [](Tape&, std::span<const Var> v) { return sum(mul(v[0], v[0])); };
    const ScalarFn h = [](Tape&, std::span<const Var> v) {
      return add(sum(mul(v[0], v[0])), mean(log_softmax_rows(v[0], 1.3)));
    };
    const ScalarFn g2 = [](Tape&, std::span<const Var> v) { return mean(log_softmax_rows(v[0], 1.3)); };
    const auto gf = grad(f, p), gg = grad(g2, p), gh = grad(h, p);
    for (std::size_t i = 0; i < gh[0].size(); ++i) CHECK(std::abs(gh[0][i] - gf[0][i] - gg[0][i]) < 1e-10);
  }
}

TEST_CASE("finite difference check on a smooth polynomial") {
  const ScalarFn cube = [](Tape&, std::span<const Var> p) { return sum(mul(mul(p[0], p[0]), p[0])); };
  const std::vector<Tensor> x{Tensor::vector({1.0})};
  CHECK(finite_diff_check(cube, x, 1e-5) < 1e-6);
  CHECK(kind_of([&] { finite_diff_check(cube, x, 0.0); }) == ErrorKind::parameter);
}

TEST_CASE("every differentiable op passes the finite difference check") {
  std::mt19937_64 rng(7);
  std::vector<std::pair<const char*, ScalarFn>> fns{
      {"matmul", [](Tape&, std::span<const Var> p) { return sum(mul(matmul(p[0], p[1]), matmul(p[0], p[1]))); }},
      {"matmul_bt", [](Tape&, std::span<const Var> p) { return sum(mul(matmul_bt(p[0], p[0]), matmul_bt(p[0], p[0]))); }},
      {"relu", [](Tape&, std::span<const Var> p) { return sum(mul(relu(p[0]), p[0])); }},
      {"l2_normalize", [](Tape&, std::span<const Var> p) { return sum(mul(l2_normalize_rows(p[0]), p[0])); }},
      {"cosine", [](Tape&, std::span<const Var> p) { return sum(mul(cosine_similarity_matrix(p[0], p[0]), cosine_similarity_matrix(p[0], p[0]))); }},
      {"softmax", [](Tape&, std::span<const Var> p) { return sum(mul(softmax_rows(p[0], 0.5), p[0])); }},
      {"log_softmax", [](Tape&, std::span<const Var> p) { return sum(mul(log_softmax_rows(p[0], 2.0), p[0])); }},
      {"kl", [](Tape&, std::span<const Var> p) { return kl_divergence_rows(softmax_rows(p[0], 1.0), softmax_rows(matmul(p[0], p[1]), 1.0)); }},
      {"concat", [](Tape&, std::span<const Var> p) { Var c = concat_rows(p[0], p[0]); return sum(mul(c, c)); }},
  };
  for (const auto& [name, fn] : fns) {
    CAPTURE(name);
    for (int trial = 0; trial < 20; ++trial) {
      // ReLU kinks are avoided by keeping every entry away from zero.
      Tensor a = oracle::random_matrix(3, 4, rng);
      for (double& v : a.values()) v = v > 0 ? v + 0.1 : v - 0.1;
      const std::vector<Tensor> params{a, oracle::random_matrix(4, 4, rng, 0.5)};
      CHECK(finite_diff_check(fn, params) < 1e-4);
    }
  }
}

TEST_CASE("softmax rows closed forms") {
  const Tensor s = softmax_rows(Tensor::matrix(2, 2, {0.0, 0.0, 1.0, 2.0}), 1.0);
  CHECK(s.at(0, 0) == doctest::Approx(0.5));
  CHECK(std::abs(s.at(1, 0) - 1.0 / (1.0 + std::exp(1.0))) < 1e-12);
  CHECK(std::abs(s.at(1, 1) - std::exp(1.0) / (1.0 + std::exp(1.0))) < 1e-12);
  CHECK(s.at(1, 0) == doctest::Approx(0.2689).epsilon(1e-4));
  const Tensor flat = softmax_rows(Tensor::matrix(1, 2, {1.0, 2.0}), 1e6);
  CHECK(std::abs(flat[0] - 0.5) < 1e-5);
  CHECK(kind_of([] { softmax_rows(Tensor::matrix(1, 2, {1.0, 2.0}), 0.0); }) == ErrorKind::parameter);
}

TEST_CASE("softmax invariants") {
  std::mt19937_64 rng(3);
  const Tensor m = oracle::random_matrix(5, 7, rng, 3.0);
  Tensor shifted = m;
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (double& v : shifted.row(r)) v += static_cast<double>(r) * 10.0;
  const Tensor a = softmax_rows(m, 0.3), b = softmax_rows(shifted, 0.3);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double total = 0.0;
    for (double v : a.row(r)) total += v;
    CHECK(std::abs(total - 1.0) < 1e-12);
  }
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) < 1e-12);
}

TEST_CASE("cosine similarity matrix") {
  std::mt19937_64 rng(5);
  const Tensor a = oracle::random_matrix(3, 3, rng), b = oracle::random_matrix(3, 3, rng);
  const Tensor c = cosine_similarity_matrix(a, b);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) CHECK(std::abs(c.at(i, j) - oracle::cosine(a, i, b, j)) < 1e-12);

  const Tensor same = cosine_similarity_matrix(Tensor::matrix(1, 2, {3.0, 4.0}), Tensor::matrix(1, 2, {3.0, 4.0}));
  CHECK(same[0] == doctest::Approx(1.0));
  const Tensor ortho = cosine_similarity_matrix(Tensor::matrix(1, 2, {1.0, 0.0}), Tensor::matrix(1, 2, {0.0, 1.0}));
  CHECK(ortho[0] == 0.0);

  Tensor scaled = a;
  for (std::size_t r = 0; r < 3; ++r)
    for (double& v : scaled.row(r)) v *= static_cast<double>(r + 1) * 2.5;
  const Tensor c2 = cosine_similarity_matrix(scaled, b);
  for (std::size_t i = 0; i < c.size(); ++i) CHECK(std::abs(c[i] - c2[i]) < 1e-12);

  try {
    cosine_similarity_matrix(Tensor::matrix(2, 2, {1.0, 0.0, 0.0, 0.0}), Tensor::matrix(1, 2, {1.0, 1.0}));
    FAIL("expected degenerate error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::degenerate_input);
    CHECK(std::string(e.what()).find("1") != std::string::npos);
  }
}

TEST_CASE("kl divergence rows") {
  const Tensor p = Tensor::matrix(1, 2, {0.5, 0.5});
  const Tensor q = Tensor::matrix(1, 2, {0.25, 0.75});
  CHECK(kl_divergence_rows(p, p) == 0.0);
  CHECK(std::abs(kl_divergence_rows(p, q) - (0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0))) < 1e-12);
  CHECK(kl_divergence_rows(p, q) == doctest::Approx(0.1438).epsilon(1e-3));
  CHECK(kind_of([] { kl_divergence_rows(Tensor::matrix(1, 2, {0.5, 0.6}), Tensor::matrix(1, 2, {0.5, 0.5})); }) ==
        ErrorKind::distribution);
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor a = softmax_rows(oracle::random_matrix(4, 5, rng), 1.0);
    const Tensor b = softmax_rows(oracle::random_matrix(4, 5, rng), 1.0);
    CHECK(kl_divergence_rows(a, b) >= 0.0);
  }
}

TEST_CASE("matmul matches the triple loop") {
  std::mt19937_64 rng(11);
  const Tensor a = oracle::random_matrix(4, 6, rng), b = oracle::random_matrix(6, 3, rng);
  const Tensor c = matmul(a, b), o = oracle::matmul(a, b);
  for (std::size_t i = 0; i < c.size(); ++i) CHECK(std::abs(c[i] - o[i]) < 1e-12);
  CHECK(kind_of([&] { matmul(a, a); }) == ErrorKind::shape);
}

TEST_CASE("eps normalization substitutes near-zero rows") {
  const Tensor x = Tensor::matrix(2, 4, {0.0, 0.0, 0.0, 0.0, 3.0, 0.0, 4.0, 0.0});
  CHECK(kind_of([&] { l2_normalize_rows(x); }) == ErrorKind::degenerate_input);
  const Tensor u = l2_normalize_rows(x, 1e-12);
  for (double v : u.row(0)) CHECK(v == 0.5);
  CHECK(u.at(1, 0) == doctest::Approx(0.6));
  Tape tape;
  Var vx = tape.leaf(x);
  tape.backward(sum(mul(l2_normalize_rows(vx, 1e-12), tape.constant(Tensor::filled({2, 4}, 1.0)))));
  const Tensor gx = tape.grad(vx);
  for (double g : gx.row(0)) CHECK(g == 0.0);
}
