// SPDX-License-Identifier: Apache-2.0
#include "mlkd/losses.hpp"

#include <cmath>
#include <string>

#include "mlkd/error.hpp"
#include "mlkd/log.hpp"
#include "mlkd/ops.hpp"

namespace mlkd {

void LossWeights::validate() const {
  for (double w : {lambda_align, lambda_corr, w_sup, w_ce, w_kd}) {
    if (!(w >= 0.0) || !std::isfinite(w)) fail(ErrorKind::config, "loss weights must be finite and nonnegative");
  }
  for (double t : {tau_corr, tau_sup, kd_temperature}) {
    if (!(t > 0.0) || !std::isfinite(t)) fail(ErrorKind::config, "temperatures must be finite and positive");
  }
}

void to_json(nlohmann::json& j, const LossWeights& w) {
  j = nlohmann::json{{"lambda_align", w.lambda_align}, {"lambda_corr", w.lambda_corr},
                     {"w_sup", w.w_sup},               {"w_ce", w.w_ce},
                     {"w_kd", w.w_kd},                 {"tau_corr", w.tau_corr},
                     {"tau_sup", w.tau_sup},           {"kd_temperature", w.kd_temperature}};
}

void from_json(const nlohmann::json& j, LossWeights& w) {
  LossWeights out;
  for (const auto& [key, value] : j.items()) {
    if (key == "lambda_align") out.lambda_align = value.get<double>();
    else if (key == "lambda_corr") out.lambda_corr = value.get<double>();
    else if (key == "w_sup") out.w_sup = value.get<double>();
    else if (key == "w_ce") out.w_ce = value.get<double>();
    else if (key == "w_kd") out.w_kd = value.get<double>();
    else if (key == "tau_corr") out.tau_corr = value.get<double>();
    else if (key == "tau_sup") out.tau_sup = value.get<double>();
    else if (key == "kd_temperature") out.kd_temperature = value.get<double>();
    else fail(ErrorKind::config, "unknown loss weight key '" + key + "'");
  }
  out.validate();
  w = out;
}

void to_json(nlohmann::json& j, const LossBreakdown& b) {
  j = nlohmann::json{{"align", b.align}, {"corr", b.corr}, {"sup", b.sup},
                     {"ce", b.ce},       {"kd", b.kd},     {"total", b.total}};
}

TeacherKind parse_teacher_kind(const std::string& s) {
  if (s == "supervised") return TeacherKind::supervised;
  if (s == "feature_only") return TeacherKind::feature_only;
  fail(ErrorKind::config, "teacher_kind must be 'supervised' or 'feature_only', got '" + s + "'");
}

const char* to_string(TeacherKind kind) {
  return kind == TeacherKind::supervised ? "supervised" : "feature_only";
}

LossBreakdown loss_total(const LossValues& values, const LossWeights& weights, TeacherKind kind) {
  if (kind == TeacherKind::feature_only && (values.sup || values.ce || values.kd)) {
    fail(ErrorKind::capability, "sup/ce/kd terms need a supervised teacher");
  }
  LossBreakdown b;
  b.align = values.align.value_or(0.0);
  b.corr = values.corr.value_or(0.0);
  b.sup = values.sup.value_or(0.0);
  b.ce = values.ce.value_or(0.0);
  b.kd = values.kd.value_or(0.0);
  b.total = weights.lambda_align * b.align + weights.lambda_corr * b.corr;
  if (kind == TeacherKind::supervised) {
    b.total += weights.w_sup * b.sup + weights.w_ce * b.ce + weights.w_kd * b.kd;
  }
  return b;
}

Var loss_kd(const Tensor& logits_t, Var logits_s, double temperature) {
  require_same_shape(logits_t, logits_s.value(), "loss_kd");
  Tape& tape = logits_s.tape();
  Var target = tape.constant(softmax_rows(logits_t, temperature));
  Var log_q = log_softmax_rows(logits_s, temperature);
  return scale(sum(mul(target, log_q)), -1.0 / static_cast<double>(logits_t.rows()));
}

Var loss_align(Var z_s, const Tensor& z_t, const BoundHead& head) {
  const std::size_t head_in = head.hidden.weight.value().dim(0);
  const std::size_t head_out = head.output.weight.value().dim(1);
  if (z_s.value().rank() != 2 || z_s.value().cols() != head_in) {
    fail(ErrorKind::shape, "loss_align: student features " + shape_string(z_s.shape()) + " vs head input " +
                               std::to_string(head_in));
  }
  if (z_t.rank() != 2 || z_t.cols() != head_out || z_t.rows() != z_s.value().rows()) {
    fail(ErrorKind::shape, "loss_align: teacher features " + shape_string(z_t.shape()) + " vs head output " +
                               std::to_string(head_out));
  }
  Var diff = sub(apply_head(head, z_s), z_s.tape().constant(z_t));
  return scale(sum(mul(diff, diff)), 1.0 / static_cast<double>(z_t.rows()));
}

Var loss_corr(const Tensor& anchor_t, const Tensor& batch_t, Var anchor_s, Var batch_s, double tau, double eps) {
  const std::size_t n = batch_t.rows();
  if (n < 2 || batch_s.value().rows() < 2) fail(ErrorKind::degenerate_input, "loss_corr needs a batch of at least 2");
  if (anchor_t.rows() != n || anchor_s.value().rows() != n || batch_s.value().rows() != n) {
    fail(ErrorKind::shape, "loss_corr: anchors and batches must share the batch size");
  }
  Tape& tape = batch_s.tape();
  Var target = tape.constant(softmax_rows(cosine_similarity_matrix(anchor_t, batch_t, eps), tau));
  Var student = softmax_rows(cosine_similarity_matrix(anchor_s, batch_s, eps), tau);
  return kl_divergence_rows(target, student);
}

Var loss_sup(Var anchors, Var bank, std::span<const int> labels, double tau, AnchorMode mode) {
  if (!(tau > 0.0)) fail(ErrorKind::parameter, "loss_sup: temperature must be positive");
  const Tensor& a = anchors.value();
  const Tensor& b = bank.value();
  require_matrix(a, "loss_sup anchors");
  require_matrix(b, "loss_sup bank");
  const std::size_t n = a.rows();
  const std::size_t m = b.rows();
  if (m != 2 * n || a.cols() != b.cols() || labels.size() != m) {
    fail(ErrorKind::shape, "loss_sup: anchors " + shape_string(a.shape()) + ", bank " + shape_string(b.shape()) +
                               ", " + std::to_string(labels.size()) + " labels");
  }
  for (const Tensor* t : {&a, &b}) {
    for (std::size_t r = 0; r < t->rows(); ++r) {
      double s = 0.0;
      for (double v : t->row(r)) s += v * v;
      if (std::abs(std::sqrt(s) - 1.0) > 1e-6) {
        fail(ErrorKind::parameter, "loss_sup: representation row " + std::to_string(r) + " is not unit length");
      }
    }
  }

  if (mode == AnchorMode::teacher) anchors = detach(anchors);
  else bank = detach(bank);

  std::vector<std::uint8_t> include(n * m, 1);
  for (std::size_t i = 0; i < n; ++i) include[i * m + i] = 0;

  Tensor weights({n, m});
  std::size_t skipped = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t same_class_anchors = 0;
    for (std::size_t k = 0; k < n; ++k) same_class_anchors += labels[k] == labels[i] ? 1 : 0;
    const double c = 2.0 * static_cast<double>(same_class_anchors) - 1.0;
    std::size_t positives = 0;
    for (std::size_t j = 0; j < m; ++j) {
      if (j != i && labels[j] == labels[i]) {
        weights.at(i, j) = 1.0 / (c * static_cast<double>(n));
        ++positives;
      }
    }
    skipped += positives == 0 ? 1 : 0;
  }
  if (skipped > 0) {
    log_warning("loss_sup: " + std::to_string(skipped) + " anchor(s) without positives contribute zero");
  }

  Tape& tape = anchors.tape();
  Var log_probs = masked_log_softmax_rows(scale(matmul_bt(anchors, bank), 1.0 / tau), std::move(include));
  return scale(sum(mul(tape.constant(std::move(weights)), log_probs)), -1.0);
}

Var loss_ce(Var logits, std::span<const int> labels) {
  require_matrix(logits.value(), "loss_ce");
  return nll_mean(log_softmax_rows(logits, 1.0), labels);
}

TotalLoss loss_total(const LossTerms& terms, const LossWeights& weights, TeacherKind kind) {
  LossValues values;
  if (terms.align) values.align = terms.align->value().item();
  if (terms.corr) values.corr = terms.corr->value().item();
  if (terms.sup) values.sup = terms.sup->value().item();
  if (terms.ce) values.ce = terms.ce->value().item();
  if (terms.kd) values.kd = terms.kd->value().item();
  TotalLoss out{{}, loss_total(values, weights, kind)};

  std::optional<Var> total;
  auto accumulate = [&](const std::optional<Var>& term, double w) {
    if (!term) return;
    Var weighted = scale(*term, w);
    total = total ? add(*total, weighted) : weighted;
  };
  accumulate(terms.align, weights.lambda_align);
  accumulate(terms.corr, weights.lambda_corr);
  accumulate(terms.sup, weights.w_sup);
  accumulate(terms.ce, weights.w_ce);
  accumulate(terms.kd, weights.w_kd);
  if (!total) fail(ErrorKind::contract, "loss_total called without any loss term");
  out.total = *total;
  return out;
}

// ---- Value-only -------------------------------------------------------------

double loss_kd(const Tensor& logits_t, const Tensor& logits_s, double temperature) {
  Tape tape;
  return loss_kd(logits_t, tape.constant(logits_s), temperature).value().item();
}

double loss_align(const Tensor& z_s, const Tensor& z_t, const TransformHead& head) {
  Tape tape;
  return loss_align(tape.constant(z_s), z_t, bind(tape, head, false)).value().item();
}

double loss_corr(const Tensor& anchor_t, const Tensor& batch_t, const Tensor& anchor_s, const Tensor& batch_s,
                 double tau) {
  Tape tape;
  return loss_corr(anchor_t, batch_t, tape.constant(anchor_s), tape.constant(batch_s), tau).value().item();
}

double loss_sup(const Tensor& anchors, const Tensor& bank, std::span<const int> labels, double tau, AnchorMode mode) {
  Tape tape;
  return loss_sup(tape.constant(anchors), tape.constant(bank), labels, tau, mode).value().item();
}

double loss_ce(const Tensor& logits, std::span<const int> labels) {
  Tape tape;
  return loss_ce(tape.constant(logits), labels).value().item();
}

KdDecomposition decompose_kd(const Dense& teacher_projection, const Tensor& z_t, const Tensor& transformed_s,
                             const Dense& student_projection, const Tensor& z_s) {
  auto logits = [](const Dense& d, const Tensor& z) {
    Tensor out = matmul(z, d.weight);
    for (std::size_t r = 0; r < out.rows(); ++r) {
      for (std::size_t c = 0; c < out.cols(); ++c) out.at(r, c) += d.bias[c];
    }
    return out;
  };
  const Tensor p_t = softmax_rows(logits(teacher_projection, z_t), 1.0);
  const Tensor p_h = softmax_rows(logits(teacher_projection, transformed_s), 1.0);
  const Tensor p_s = softmax_rows(logits(student_projection, z_s), 1.0);
  require_same_shape(p_t, p_s, "decompose_kd");

  KdDecomposition d;
  const double n = static_cast<double>(p_t.rows());
  for (std::size_t i = 0; i < p_t.size(); ++i) {
    const double log_h = std::log(std::max(p_h[i], kLogClamp));
    const double log_s = std::log(std::max(p_s[i], kLogClamp));
    d.kd -= p_t[i] * log_s / n;
    d.alignment_term -= p_t[i] * log_h / n;
    d.residual += p_t[i] * (log_h - log_s) / n;
  }
  return d;
}

}  // namespace mlkd
