// SPDX-License-Identifier: Apache-2.0
#include "mlkd/info_bound.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "mlkd/error.hpp"
#include "mlkd/ops.hpp"
#include "mlkd/rng.hpp"

namespace mlkd {

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void require_unit(std::span<const double> v, const std::string& what, double tol, ErrorKind kind) {
  const double n = std::sqrt(dot(v, v));
  if (!(std::abs(n - 1.0) <= tol)) fail(kind, what + " must be unit length (norm " + std::to_string(n) + ")");
}

}  // namespace

double info_nce_multi_positive(std::span<const double> anchor, const std::vector<std::vector<double>>& positives,
                               const std::vector<std::vector<double>>& negatives, double tau) {
  if (positives.empty() || negatives.empty()) {
    fail(ErrorKind::parameter, "info_nce: needs at least one positive and one negative");
  }
  if (!(tau > 0.0)) fail(ErrorKind::parameter, "info_nce: tau must be positive");
  require_unit(anchor, "info_nce anchor", 1e-6, ErrorKind::parameter);
  std::vector<double> neg_logits;
  for (const auto& n : negatives) {
    if (n.size() != anchor.size()) fail(ErrorKind::shape, "info_nce: negative has the wrong width");
    require_unit(n, "info_nce negative", 1e-6, ErrorKind::parameter);
    neg_logits.push_back(dot(anchor, n) / tau);
  }
  double total = 0.0;
  for (const auto& p : positives) {
    if (p.size() != anchor.size()) fail(ErrorKind::shape, "info_nce: positive has the wrong width");
    require_unit(p, "info_nce positive", 1e-6, ErrorKind::parameter);
    const double pos = dot(anchor, p) / tau;
    double top = pos;
    for (double l : neg_logits) top = std::max(top, l);
    double denom = std::exp(pos - top);
    for (double l : neg_logits) denom += std::exp(l - top);
    total += -(pos - top - std::log(denom));
  }
  return total / static_cast<double>(positives.size());
}

MiBound mi_lower_bound(std::span<const PairSample> samples, const DensityRatio& ratio) {
  MiBound out;
  for (const auto& s : samples) {
    if (s.c == 1) ++out.positives;
    else if (s.c == 0) ++out.negatives;
    else fail(ErrorKind::parameter, "mi_lower_bound: indicator must be 0 or 1");
  }
  if (out.positives == 0 || out.negatives == 0) {
    fail(ErrorKind::parameter, "mi_lower_bound: needs both positive and negative pairs");
  }
  const double odds = static_cast<double>(out.negatives) / static_cast<double>(out.positives);
  double acc = 0.0;
  for (const auto& s : samples) {
    if (s.c != 1) continue;
    const double r = ratio(s.t, s.s);
    if (!(r >= 0.0) || !std::isfinite(r)) fail(ErrorKind::numeric, "mi_lower_bound: critic returned an invalid ratio");
    acc += std::log(std::max(r / (r + odds), kLogClamp));
  }
  out.constant_term = std::log(odds);
  out.expectation_term = acc / static_cast<double>(out.positives);
  out.bound = out.constant_term + out.expectation_term;
  return out;
}

std::vector<PairSample> gaussian_pairs(double rho, std::size_t positives, std::size_t negatives, std::uint64_t seed) {
  if (!(rho > -1.0 && rho < 1.0)) fail(ErrorKind::parameter, "gaussian_pairs: |rho| must be below 1");
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double c = std::sqrt(1.0 - rho * rho);
  std::vector<PairSample> out;
  out.reserve(positives + negatives);
  for (std::size_t i = 0; i < positives; ++i) {
    const double t = normal(rng);
    out.push_back({{t}, {rho * t + c * normal(rng)}, 1});
  }
  for (std::size_t i = 0; i < negatives; ++i) {
    const double t = normal(rng);
    out.push_back({{t}, {normal(rng)}, 0});
  }
  return out;
}

DensityRatio gaussian_density_ratio(double rho) {
  if (!(rho > -1.0 && rho < 1.0)) fail(ErrorKind::parameter, "gaussian_density_ratio: |rho| must be below 1");
  const double one_minus = 1.0 - rho * rho;
  return [rho, one_minus](std::span<const double> t, std::span<const double> s) {
    if (t.size() != 1 || s.size() != 1) fail(ErrorKind::shape, "gaussian_density_ratio: expects scalar pairs");
    const double a = t[0], b = s[0];
    return std::exp(-(rho * rho * (a * a + b * b) - 2.0 * rho * a * b) / (2.0 * one_minus)) / std::sqrt(one_minus);
  };
}

double gaussian_mutual_information(double rho) { return -0.5 * std::log1p(-rho * rho); }

IdentityCheck align_cosine_identity_check(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) fail(ErrorKind::shape, "identity check: vectors must share a nonzero width");
  require_unit(a, "identity check a", 1e-10, ErrorKind::contract);
  require_unit(b, "identity check b", 1e-10, ErrorKind::contract);
  IdentityCheck out;
  out.lhs = -dot(a, b);
  double sq = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sq += (a[i] - b[i]) * (a[i] - b[i]);
  out.rhs = 0.5 * sq - 1.0;
  out.gap = std::abs(out.lhs - out.rhs);
  return out;
}

}  // namespace mlkd
