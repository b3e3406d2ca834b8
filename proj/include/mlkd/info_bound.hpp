// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace mlkd {

struct PairSample {
  std::vector<double> t;
  std::vector<double> s;
  int c = 0;  // 1: drawn from the joint, 0: from the product of marginals
};

/// -mean_m log( e^{a.p_m/tau} / (e^{a.p_m/tau} + sum_k e^{a.n_k/tau}) ) over unit vectors.
double info_nce_multi_positive(std::span<const double> anchor, const std::vector<std::vector<double>>& positives,
                               const std::vector<std::vector<double>>& negatives, double tau);

/// p(t, s) / (p(t) p(s)).
using DensityRatio = std::function<double(std::span<const double> t, std::span<const double> s)>;

struct MiBound {
  double constant_term = 0.0;     // log(N_n / N_p)
  double expectation_term = 0.0;  // mean over positives of log q(C=1 | t, s)
  double bound = 0.0;
  std::size_t positives = 0;
  std::size_t negatives = 0;
};

/// With priors q(C=1) = N_p / (N_p + N_n) the posterior is r / (r + N_n / N_p).
MiBound mi_lower_bound(std::span<const PairSample> samples, const DensityRatio& ratio);

/// Standard bivariate normal pairs with correlation rho: positives from the
/// joint, negatives pair t with an independent s.
std::vector<PairSample> gaussian_pairs(double rho, std::size_t positives, std::size_t negatives, std::uint64_t seed);
DensityRatio gaussian_density_ratio(double rho);
/// -0.5 log(1 - rho^2)
double gaussian_mutual_information(double rho);

struct IdentityCheck {
  double lhs = 0.0;  // -a.b
  double rhs = 0.0;  // 0.5 ||a - b||^2 - 1
  double gap = 0.0;
};

IdentityCheck align_cosine_identity_check(std::span<const double> a, std::span<const double> b);

}  // namespace mlkd
