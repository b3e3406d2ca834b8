// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <random>

#include "mlkd/error.hpp"
#include "mlkd/gradcheck.hpp"
#include "mlkd/losses.hpp"
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

std::vector<std::vector<double>> cosine_rows(const Tensor& a, const Tensor& b) {
  std::vector<std::vector<double>> out(a.rows(), std::vector<double>(b.rows()));
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.rows(); ++j) out[i][j] = oracle::cosine(a, i, b, j);
  return out;
}

double kd_oracle(const Tensor& t, const Tensor& s, double temp) {
  double total = 0.0;
  for (std::size_t r = 0; r < t.rows(); ++r) {
    const auto p = oracle::softmax({t.row(r).begin(), t.row(r).end()}, temp);
    const auto q = oracle::softmax({s.row(r).begin(), s.row(r).end()}, temp);
    for (std::size_t k = 0; k < p.size(); ++k) total -= p[k] * std::log(q[k]);
  }
  return total / static_cast<double>(t.rows());
}

}  // namespace

TEST_CASE("kd loss") {
  std::mt19937_64 rng(1);
  const Tensor t = oracle::random_matrix(2, 3, rng, 2.0), s = oracle::random_matrix(2, 3, rng, 2.0);
  CHECK(std::abs(loss_kd(t, s, 4.0) - kd_oracle(t, s, 4.0)) < 1e-12);

  double entropy = 0.0;
  for (std::size_t r = 0; r < 2; ++r)
    for (double p : oracle::softmax({t.row(r).begin(), t.row(r).end()}, 4.0)) entropy -= p * std::log(p) / 2.0;
  CHECK(std::abs(loss_kd(t, t, 4.0) - entropy) < 1e-12);

  const Tensor peaked = Tensor::matrix(1, 2, {1e6, 0.0});
  CHECK(loss_kd(peaked, peaked, 1.0) < 1e-9);
  CHECK(kind_of([&] { loss_kd(t, oracle::random_matrix(2, 4, rng), 1.0); }) == ErrorKind::shape);
}

TEST_CASE("align loss") {
  TransformHead head = make_transform_head(2, 2, 1.0, 0);
  for (Dense* d : {&head.hidden, &head.output}) {
    d->weight = Tensor::matrix(2, 2, {1.0, 0.0, 0.0, 1.0});
    d->bias = Tensor::zeros({2});
  }
  CHECK(loss_align(Tensor::matrix(1, 2, {1.0, 0.0}), Tensor::matrix(1, 2, {0.0, 1.0}), head) == doctest::Approx(2.0));
  const Tensor z = Tensor::matrix(2, 2, {0.3, 1.2, 2.0, 0.0});
  CHECK(loss_align(z, z, head) == 0.0);
  CHECK(kind_of([&] { loss_align(Tensor::zeros({1, 3}), z, head); }) == ErrorKind::shape);

  std::mt19937_64 rng(2);
  const TransformHead random_head = make_transform_head(3, 4, 2.0, 5);
  const Tensor zs = oracle::random_matrix(5, 3, rng), zt = oracle::random_matrix(5, 4, rng);
  const Tensor h = apply_head(random_head, zs);
  double expected = 0.0;
  for (std::size_t i = 0; i < h.size(); ++i) expected += (h[i] - zt[i]) * (h[i] - zt[i]) / 5.0;
  CHECK(std::abs(loss_align(zs, zt, random_head) - expected) < 1e-12);

  const std::vector<Tensor> params{random_head.hidden.weight, random_head.hidden.bias, random_head.output.weight,
                                   random_head.output.bias, zs};
  const ScalarFn fn = [&](Tape& tape, std::span<const Var> p) {
    (void)tape;
    return loss_align(p[4], zt, BoundHead{{p[0], p[1]}, {p[2], p[3]}});
  };
  CHECK(finite_diff_check(fn, params) < 1e-4);
}

TEST_CASE("corr loss hand case and fixed point") {
  // Rows chosen so the cosine matrices are exactly [[1,0],[0,1]] and all ones.
  const Tensor ta = Tensor::matrix(2, 2, {1.0, 0.0, 0.0, 1.0});
  const Tensor sa = Tensor::matrix(2, 2, {1.0, 0.0, 2.0, 0.0});
  const double p = std::exp(2.0) / (1.0 + std::exp(2.0));
  const double expected = p * std::log(p / 0.5) + (1.0 - p) * std::log((1.0 - p) / 0.5);
  CHECK(std::abs(loss_corr(ta, ta, sa, sa, 0.5) - expected) < 1e-12);
  CHECK(loss_corr(ta, ta, sa, sa, 0.5) == doctest::Approx(0.3278).epsilon(1e-3));

  std::mt19937_64 rng(3);
  const Tensor a = oracle::random_matrix(5, 4, rng), b = oracle::random_matrix(5, 4, rng);
  CHECK(std::abs(loss_corr(a, b, a, b, 0.5)) < 1e-15);
  CHECK(kind_of([&] { loss_corr(gather_rows(a, std::vector<std::size_t>{0}), gather_rows(b, std::vector<std::size_t>{0}),
                                gather_rows(a, std::vector<std::size_t>{0}), gather_rows(b, std::vector<std::size_t>{0}),
                                0.5); }) == ErrorKind::degenerate_input);
  Tensor zero = a;
  for (double& v : zero.row(2)) v = 0.0;
  CHECK(kind_of([&] { loss_corr(a, b, zero, b, 0.5); }) == ErrorKind::degenerate_input);
}

TEST_CASE("corr loss matches the relation oracle and is scale invariant") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor at = oracle::random_matrix(6, 5, rng), bt = oracle::random_matrix(6, 5, rng);
    const Tensor as = oracle::random_matrix(6, 3, rng), bs = oracle::random_matrix(6, 3, rng);
    const double v = loss_corr(at, bt, as, bs, 0.5);
    CHECK(std::abs(v - oracle::relation_kl(cosine_rows(at, bt), cosine_rows(as, bs), 0.5)) < 1e-12);
    CHECK(v >= 0.0);
    Tensor bt3 = bt, bs_scaled = bs;
    for (double& x : bt3.values()) x *= 3.0;
    for (std::size_t r = 0; r < bs.rows(); ++r)
      for (double& x : bs_scaled.row(r)) x *= 0.1 + static_cast<double>(r);
    CHECK(std::abs(loss_corr(at, bt3, as, bs, 0.5) - v) < 1e-12);
    CHECK(std::abs(loss_corr(at, bt, as, bs_scaled, 0.5) - v) < 1e-9);
  }
}

TEST_CASE("sup loss matches the triple loop oracle") {
  std::mt19937_64 rng(5);
  const std::vector<int> labels{0, 0, 1, 1, 0, 0, 1, 1};
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor anchors = oracle::random_unit_rows(4, 6, rng), bank = oracle::random_unit_rows(8, 6, rng);
    const double expected = oracle::sup_loss(anchors, bank, labels, 0.07);
    CHECK(std::abs(loss_sup(anchors, bank, labels, 0.07, AnchorMode::student) - expected) < 1e-12);
    CHECK(std::abs(loss_sup(anchors, bank, labels, 0.07, AnchorMode::teacher) - expected) < 1e-12);
  }
}

TEST_CASE("sup loss closed forms") {
  // Identical representations: each positive log term is log(1/(2N-1)).
  const std::size_t n = 3;
  Tensor anchors({n, 2}), bank({2 * n, 2});
  for (std::size_t r = 0; r < n; ++r) anchors.at(r, 0) = 1.0;
  for (std::size_t r = 0; r < 2 * n; ++r) bank.at(r, 0) = 1.0;
  const std::vector<int> labels{0, 1, 1, 0, 1, 1};
  // Anchor 0: one positive, C=1. Anchors 1,2: three positives each, C=3.
  const double expected = std::log(5.0);
  CHECK(std::abs(loss_sup(anchors, bank, labels, 0.07, AnchorMode::student) - expected) < 1e-12);

  // Single positive, distinct classes: reduces to InfoNCE with the view partner as positive.
  std::mt19937_64 rng(6);
  const Tensor a = oracle::random_unit_rows(2, 3, rng);
  const Tensor b = concat_rows(a, a);
  const std::vector<int> distinct{0, 1, 0, 1};
  double nce = 0.0;
  for (std::size_t i = 0; i < 2; ++i) {
    double denom = 0.0;
    for (std::size_t k = 0; k < 4; ++k)
      if (k != i) denom += std::exp(oracle::dot_rows(a, i, b, k) / 0.5);
    nce -= std::log(std::exp(oracle::dot_rows(a, i, b, i + 2) / 0.5) / denom) / 2.0;
  }
  CHECK(std::abs(loss_sup(a, b, distinct, 0.5, AnchorMode::student) - nce) < 1e-12);

  const Tensor not_unit = Tensor::matrix(2, 3, {1.0, 1.0, 0.0, 1.0, 0.0, 0.0});
  CHECK(kind_of([&] { loss_sup(not_unit, b, distinct, 0.5, AnchorMode::student); }) == ErrorKind::parameter);
}

TEST_CASE("sup loss gradient blocking") {
  std::mt19937_64 rng(7);
  const Tensor a = oracle::random_unit_rows(3, 4, rng), b = oracle::random_unit_rows(6, 4, rng);
  const std::vector<int> labels{0, 1, 0, 0, 1, 0};
  for (AnchorMode mode : {AnchorMode::student, AnchorMode::teacher}) {
    Tape tape;
    Var va = tape.leaf(a), vb = tape.leaf(b);
    tape.backward(loss_sup(va, vb, labels, 0.07, mode));
    const Tensor blocked = mode == AnchorMode::student ? tape.grad(vb) : tape.grad(va);
    const Tensor open = mode == AnchorMode::student ? tape.grad(va) : tape.grad(vb);
    for (double v : blocked.values()) CHECK(v == 0.0);
    double norm = 0.0;
    for (double v : open.values()) norm += v * v;
    CHECK(norm > 0.0);
  }
}

TEST_CASE("ce loss") {
  const std::vector<int> labels{3, 7};
  CHECK(std::abs(loss_ce(Tensor::zeros({2, 10}), labels) - std::log(10.0)) < 1e-12);
  Tensor confident = Tensor::zeros({2, 10});
  confident.at(0, 3) = 1e6;
  confident.at(1, 7) = 1e6;
  CHECK(loss_ce(confident, labels) < 1e-12);
  std::mt19937_64 rng(8);
  const Tensor l = oracle::random_matrix(2, 10, rng, 3.0);
  double expected = 0.0;
  for (std::size_t r = 0; r < 2; ++r)
    expected -= std::log(oracle::softmax({l.row(r).begin(), l.row(r).end()}, 1.0)[static_cast<std::size_t>(labels[r])]) / 2.0;
  CHECK(std::abs(loss_ce(l, labels) - expected) < 1e-12);
  const std::vector<int> bad{3, 10};
  CHECK(kind_of([&] { loss_ce(l, bad); }) == ErrorKind::label);
}

TEST_CASE("weighted total") {
  const LossWeights w;
  CHECK(loss_total(LossValues{}, w, TeacherKind::feature_only).total == 0.0);
  CHECK(loss_total(LossValues{1.0, 1.0, {}, {}, {}}, w, TeacherKind::feature_only).total == doctest::Approx(30.0));
  const LossBreakdown b = loss_total(LossValues{1.0, 1.0, 1.0, 1.0, {}}, w, TeacherKind::supervised);
  CHECK(b.total == doctest::Approx(31.5));
  CHECK(kind_of([&] { loss_total(LossValues{1.0, 1.0, 1.0, {}, {}}, w, TeacherKind::feature_only); }) ==
        ErrorKind::capability);
  const LossBreakdown r = loss_total(LossValues{0.3, 0.7, 0.2, 1.9, 0.5}, LossWeights{2, 3, 4, 5, 6, 0.5, 0.07, 4},
                                     TeacherKind::supervised);
  CHECK(std::abs(r.total - (2 * 0.3 + 3 * 0.7 + 4 * 0.2 + 5 * 1.9 + 6 * 0.5)) < 1e-12);
}

TEST_CASE("loss weights validation and json") {
  LossWeights w;
  w.tau_sup = 0.0;
  CHECK(kind_of([&] { w.validate(); }) == ErrorKind::config);
  w = LossWeights{};
  w.lambda_align = -1.0;
  CHECK(kind_of([&] { w.validate(); }) == ErrorKind::config);
  const LossWeights d;
  nlohmann::json j = d;
  CHECK(j.get<LossWeights>() == d);
}

TEST_CASE("kd decomposition residual equals the kl term") {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 5; ++trial) {
    const Dense wt{oracle::random_matrix(4, 5, rng), oracle::random_matrix(1, 5, rng).reshaped({5})};
    const Dense ws{oracle::random_matrix(3, 5, rng), oracle::random_matrix(1, 5, rng).reshaped({5})};
    const Tensor zt = oracle::random_matrix(6, 4, rng), zs = oracle::random_matrix(6, 3, rng);
    const KdDecomposition d = decompose_kd(wt, zt, zt, ws, zs);
    const Tensor lt = oracle::matmul(zt, wt.weight), ls = oracle::matmul(zs, ws.weight);
    double kl = 0.0, self_ce = 0.0;
    for (std::size_t r = 0; r < 6; ++r) {
      std::vector<double> a(5), b(5);
      for (std::size_t c = 0; c < 5; ++c) {
        a[c] = lt.at(r, c) + wt.bias[c];
        b[c] = ls.at(r, c) + ws.bias[c];
      }
      const auto p = oracle::softmax(a, 1.0), q = oracle::softmax(b, 1.0);
      for (std::size_t c = 0; c < 5; ++c) {
        kl += p[c] * std::log(p[c] / q[c]) / 6.0;
        self_ce -= p[c] * std::log(p[c]) / 6.0;
      }
    }
    CHECK(std::abs(d.residual - kl) < 1e-10);
    CHECK(std::abs(d.alignment_term - self_ce) < 1e-10);
    CHECK(std::abs(d.kd - d.alignment_term - d.residual) < 1e-10);
  }
}
