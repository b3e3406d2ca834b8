// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mlkd/autograd.hpp"
#include "mlkd/tensor.hpp"

namespace mlkd {

/// Lower clamp applied to every log argument.
inline constexpr double kLogClamp = 1e-12;

// ---- Tensor-level contracts ------------------------------------------------

/// Row-wise softmax of m / tau, computed with per-row max subtraction.
Tensor softmax_rows(const Tensor& m, double tau);

/// A[i,j] = <a_i, b_j> / (|a_i| |b_j|). With eps == 0 zero-norm rows are
/// rejected with the offending row index in the message; with eps > 0 rows of
/// norm <= eps normalize to the constant unit vector 1/sqrt(D).
Tensor cosine_similarity_matrix(const Tensor& a, const Tensor& b, double eps = 0.0);

/// Mean over rows of sum_k p log(p / max(q, 1e-12)). Rows of both inputs must
/// be distributions (nonnegative, sum 1 +- 1e-6).
double kl_divergence_rows(const Tensor& p, const Tensor& q);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor l2_normalize_rows(const Tensor& x, double eps = 0.0);

// ---- Differentiable operations ----------------------------------------------

Var matmul(Var a, Var b);
/// a * b^T
Var matmul_bt(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var add_bias(Var x, Var bias);
Var relu(Var x);
Var sum(Var x);
Var mean(Var x);
Var concat_rows(Var a, Var b);
Var detach(Var x);

/// Same eps convention as the tensor versions; substituted rows carry no gradient.
Var l2_normalize_rows(Var x, double eps = 0.0);
Var cosine_similarity_matrix(Var a, Var b, double eps = 0.0);
Var softmax_rows(Var m, double tau);
Var log_softmax_rows(Var m, double tau);
/// Log-softmax over the entries with include[i*cols+j] != 0; excluded
/// entries read as 0 and receive no gradient.
Var masked_log_softmax_rows(Var m, std::vector<std::uint8_t> include);
Var kl_divergence_rows(Var p, Var q);
/// -mean_i logp[i, labels[i]]
Var nll_mean(Var log_probs, std::span<const int> labels);

}  // namespace mlkd
