// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <span>

#include <json.hpp>

#include "mlkd/autograd.hpp"
#include "mlkd/network.hpp"

namespace mlkd {

struct LossWeights {
  double lambda_align = 10.0;
  double lambda_corr = 20.0;
  double w_sup = 0.5;
  double w_ce = 1.0;
  double w_kd = 0.0;  // baseline KD term, off for MLKD
  double tau_corr = 0.5;
  double tau_sup = 0.07;
  double kd_temperature = 4.0;

  void validate() const;
  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);

enum class TeacherKind { supervised, feature_only };
enum class AnchorMode { teacher, student };

TeacherKind parse_teacher_kind(const std::string& s);
const char* to_string(TeacherKind kind);

struct LossBreakdown {
  double align = 0.0;
  double corr = 0.0;
  double sup = 0.0;
  double ce = 0.0;
  double kd = 0.0;
  double total = 0.0;
};

void to_json(nlohmann::json& j, const LossBreakdown& b);

struct LossValues {
  std::optional<double> align, corr, sup, ce, kd;
};

/// Weighted total. Feature-only teachers admit only the alignment and
/// correlation terms; supervised teachers add sup, ce (and the optional kd).
LossBreakdown loss_total(const LossValues& values, const LossWeights& weights, TeacherKind kind);

// ---- Differentiable losses (teacher-side inputs are plain tensors) ----------

/// Mean over the batch of -sum_k s(t/T)_k log s(s/T)_k.
Var loss_kd(const Tensor& logits_t, Var logits_s, double temperature);

/// Mean over the batch of |head(z_s) - z_t|^2.
Var loss_align(Var z_s, const Tensor& z_t, const BoundHead& head);

/// KL(softmax(cos(anchor_t, batch_t)/tau) || softmax(cos(anchor_s, batch_s)/tau)),
/// averaged over anchors. Student inputs are already transformed.
/// eps > 0 substitutes near-zero rows as in cosine_similarity_matrix instead of failing.
Var loss_corr(const Tensor& anchor_t, const Tensor& batch_t, Var anchor_s, Var batch_s, double tau, double eps = 0.0);

/// Label-supervised contrastive distillation with N anchors against a bank of
/// 2N unit-norm entries. Bank entry i is the anchor's own sample and is
/// excluded. The teacher side is detached: the anchors in teacher mode, the
/// bank in student mode.
Var loss_sup(Var anchors, Var bank, std::span<const int> labels, double tau, AnchorMode mode);

Var loss_ce(Var logits, std::span<const int> labels);

struct LossTerms {
  std::optional<Var> align, corr, sup, ce, kd;
};

struct TotalLoss {
  Var total;
  LossBreakdown breakdown;
};

TotalLoss loss_total(const LossTerms& terms, const LossWeights& weights, TeacherKind kind);

// ---- Value-only conveniences --------------------------------------------------

double loss_kd(const Tensor& logits_t, const Tensor& logits_s, double temperature);
double loss_align(const Tensor& z_s, const Tensor& z_t, const TransformHead& head);
double loss_corr(const Tensor& anchor_t, const Tensor& batch_t, const Tensor& anchor_s, const Tensor& batch_s,
                 double tau);
double loss_sup(const Tensor& anchors, const Tensor& bank, std::span<const int> labels, double tau, AnchorMode mode);
double loss_ce(const Tensor& logits, std::span<const int> labels);

/// Splits the KD loss through the teacher projection applied to h(z_s):
/// kd == alignment_term + residual. When h(z_s) == z_t the alignment term is
/// the teacher's self cross-entropy and the residual is
/// KL(s(W_T z_T) || s(W_S z_S)).
struct KdDecomposition {
  double kd = 0.0;
  double alignment_term = 0.0;
  double residual = 0.0;
};

KdDecomposition decompose_kd(const Dense& teacher_projection, const Tensor& z_t, const Tensor& transformed_s,
                             const Dense& student_projection, const Tensor& z_s);

}  // namespace mlkd
