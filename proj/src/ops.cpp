// SPDX-License-Identifier: Apache-2.0
#include "mlkd/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "mlkd/error.hpp"

namespace mlkd {
namespace {

void require_positive_tau(double tau, const char* what) {
  if (!(tau > 0.0) || !std::isfinite(tau)) {
    fail(ErrorKind::parameter, std::string(what) + ": temperature must be positive, got " + std::to_string(tau));
  }
}

Tensor softmax_kernel(const Tensor& m, double tau) {
  Tensor out(m.shape());
  const std::size_t cols = m.cols();
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto in = m.row(r);
    auto dst = out.row(r);
    const double top = *std::max_element(in.begin(), in.end());
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      dst[c] = std::exp((in[c] - top) / tau);
      total += dst[c];
    }
    for (std::size_t c = 0; c < cols; ++c) dst[c] /= total;
  }
  return out;
}

Tensor log_softmax_kernel(const Tensor& m, double tau) {
  Tensor out(m.shape());
  const std::size_t cols = m.cols();
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto in = m.row(r);
    auto dst = out.row(r);
    const double top = *std::max_element(in.begin(), in.end());
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) total += std::exp((in[c] - top) / tau);
    const double lse = std::log(total);
    for (std::size_t c = 0; c < cols; ++c) dst[c] = (in[c] - top) / tau - lse;
  }
  return out;
}

// Rows at or below eps (eps > 0) report a norm of 0 so callers can substitute.
std::vector<double> row_norms(const Tensor& x, const char* what, double eps = 0.0) {
  std::vector<double> norms(x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double s = 0.0;
    for (double v : x.row(r)) s += v * v;
    norms[r] = std::sqrt(s);
    if (eps > 0.0) {
      if (!(norms[r] > eps)) norms[r] = 0.0;
      continue;
    }
    if (!(norms[r] > 1e-300)) {
      fail(ErrorKind::degenerate_input, std::string(what) + ": row " + std::to_string(r) + " has zero norm");
    }
  }
  return norms;
}

void require_distributions(const Tensor& p, const char* what) {
  for (std::size_t r = 0; r < p.rows(); ++r) {
    double s = 0.0;
    for (double v : p.row(r)) {
      if (v < 0.0) fail(ErrorKind::distribution, std::string(what) + ": negative entry in row " + std::to_string(r));
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-6) {
      fail(ErrorKind::distribution,
           std::string(what) + ": row " + std::to_string(r) + " sums to " + std::to_string(s));
    }
  }
}

double kl_kernel(const Tensor& p, const Tensor& q) {
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) total += p[i] * (std::log(p[i]) - std::log(std::max(q[i], kLogClamp)));
  }
  return total / static_cast<double>(p.rows());
}

void accumulate(Tensor* slot, const Tensor& g) {
  if (slot) slot->matrix() += g.matrix();
}

}  // namespace

// ---- Tensor-level -----------------------------------------------------------

Tensor softmax_rows(const Tensor& m, double tau) {
  require_positive_tau(tau, "softmax_rows");
  require_matrix(m, "softmax_rows");
  return softmax_kernel(m, tau);
}

Tensor l2_normalize_rows(const Tensor& x, double eps) {
  require_matrix(x, "l2_normalize_rows");
  const auto norms = row_norms(x, "l2_normalize_rows", eps);
  Tensor out = x;
  const double fallback = 1.0 / std::sqrt(static_cast<double>(x.cols()));
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (double& v : out.row(r)) v = norms[r] > 0.0 ? v / norms[r] : fallback;
  }
  return out;
}

Tensor cosine_similarity_matrix(const Tensor& a, const Tensor& b, double eps) {
  require_matrix(a, "cosine_similarity_matrix");
  require_matrix(b, "cosine_similarity_matrix");
  if (a.cols() != b.cols()) {
    fail(ErrorKind::shape, "cosine_similarity_matrix: width mismatch " + shape_string(a.shape()) + " vs " +
                               shape_string(b.shape()));
  }
  Tensor out({a.rows(), b.rows()});
  out.matrix().noalias() = l2_normalize_rows(a, eps).matrix() * l2_normalize_rows(b, eps).matrix().transpose();
  for (double& v : out.values()) v = std::clamp(v, -1.0, 1.0);
  return out;
}

double kl_divergence_rows(const Tensor& p, const Tensor& q) {
  require_same_shape(p, q, "kl_divergence_rows");
  require_distributions(p, "kl_divergence_rows(p)");
  require_distributions(q, "kl_divergence_rows(q)");
  return kl_kernel(p, q);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    fail(ErrorKind::shape, "matmul: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  Tensor out({a.rows(), b.cols()});
  out.matrix().noalias() = a.matrix() * b.matrix();
  return out;
}

// ---- Differentiable ---------------------------------------------------------

Var matmul(Var a, Var b) {
  Tape& tape = a.tape();
  Tensor out = matmul(a.value(), b.value());
  return tape.record("matmul", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_slot(a)) ga->matrix().noalias() += g.matrix() * b.value().matrix().transpose();
    if (Tensor* gb = t.grad_slot(b)) gb->matrix().noalias() += a.value().matrix().transpose() * g.matrix();
  });
}

Var matmul_bt(Var a, Var b) {
  Tape& tape = a.tape();
  if (a.value().cols() != b.value().cols()) {
    fail(ErrorKind::shape, "matmul_bt: " + shape_string(a.shape()) + " x " + shape_string(b.shape()) + "^T");
  }
  Tensor out({a.value().rows(), b.value().rows()});
  out.matrix().noalias() = a.value().matrix() * b.value().matrix().transpose();
  return tape.record("matmul_bt", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_slot(a)) ga->matrix().noalias() += g.matrix() * b.value().matrix();
    if (Tensor* gb = t.grad_slot(b)) gb->matrix().noalias() += g.matrix().transpose() * a.value().matrix();
  });
}

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  out.matrix() += b.value().matrix();
  return a.tape().record("add", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    accumulate(t.grad_slot(a), g);
    accumulate(t.grad_slot(b), g);
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  out.matrix() -= b.value().matrix();
  return a.tape().record("sub", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    accumulate(t.grad_slot(a), g);
    if (Tensor* gb = t.grad_slot(b)) gb->matrix() -= g.matrix();
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  out.matrix().array() *= b.value().matrix().array();
  return a.tape().record("mul", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_slot(a)) ga->matrix().array() += g.matrix().array() * b.value().matrix().array();
    if (Tensor* gb = t.grad_slot(b)) gb->matrix().array() += g.matrix().array() * a.value().matrix().array();
  });
}

Var scale(Var a, double factor) {
  Tensor out = a.value();
  out.matrix() *= factor;
  return a.tape().record("scale", std::move(out), {a}, [a, factor](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_slot(a)) ga->matrix() += factor * g.matrix();
  });
}

Var add_bias(Var x, Var bias) {
  const Tensor& xv = x.value();
  if (bias.value().size() != xv.cols()) {
    fail(ErrorKind::shape, "add_bias: bias " + shape_string(bias.shape()) + " vs input " + shape_string(xv.shape()));
  }
  Tensor out = xv;
  auto row_bias = Eigen::Map<const Eigen::RowVectorXd>(bias.value().values().data(), Eigen::Index(xv.cols()));
  out.matrix().rowwise() += row_bias;
  return x.tape().record("add_bias", std::move(out), {x, bias}, [x, bias](Tape& t, const Tensor& g) {
    accumulate(t.grad_slot(x), g);
    if (Tensor* gb = t.grad_slot(bias)) {
      Eigen::Map<Eigen::RowVectorXd>(gb->values().data(), Eigen::Index(gb->size())) += g.matrix().colwise().sum();
    }
  });
}

Var relu(Var x) {
  Tensor out = x.value();
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return x.tape().record("relu", std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_slot(x)) {
      const auto& xv = x.value();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (xv[i] > 0.0) (*gx)[i] += g[i];
      }
    }
  });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return x.tape().record("sum", Tensor::scalar(s), {x}, [x](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_slot(x)) gx->matrix().array() += g[0];
  });
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var concat_rows(Var a, Var b) {
  Tensor out = concat_rows(a.value(), b.value());
  return a.tape().record("concat_rows", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    const std::size_t split = a.value().size();
    if (Tensor* ga = t.grad_slot(a)) {
      for (std::size_t i = 0; i < split; ++i) (*ga)[i] += g[i];
    }
    if (Tensor* gb = t.grad_slot(b)) {
      for (std::size_t i = 0; i < gb->size(); ++i) (*gb)[i] += g[split + i];
    }
  });
}

Var detach(Var x) { return x.tape().constant(x.value()); }

Var l2_normalize_rows(Var x, double eps) {
  require_matrix(x.value(), "l2_normalize_rows");
  auto norms = row_norms(x.value(), "l2_normalize_rows", eps);
  Tensor out = l2_normalize_rows(x.value(), eps);
  Tensor unit = out;
  return x.tape().record("l2_normalize_rows", std::move(out), {x},
                         [x, unit = std::move(unit), norms = std::move(norms)](Tape& t, const Tensor& g) {
                           Tensor* gx = t.grad_slot(x);
                           if (!gx) return;
                           for (std::size_t r = 0; r < unit.rows(); ++r) {
                             if (norms[r] == 0.0) continue;
                             auto yr = unit.row(r);
                             auto gr = g.row(r);
                             double dot = 0.0;
                             for (std::size_t c = 0; c < yr.size(); ++c) dot += yr[c] * gr[c];
                             auto dst = gx->row(r);
                             for (std::size_t c = 0; c < yr.size(); ++c) dst[c] += (gr[c] - yr[c] * dot) / norms[r];
                           }
                         });
}

Var cosine_similarity_matrix(Var a, Var b, double eps) {
  if (a.value().cols() != b.value().cols()) {
    fail(ErrorKind::shape, "cosine_similarity_matrix: width mismatch " + shape_string(a.shape()) + " vs " +
                               shape_string(b.shape()));
  }
  return matmul_bt(l2_normalize_rows(a, eps), l2_normalize_rows(b, eps));
}

Var softmax_rows(Var m, double tau) {
  require_positive_tau(tau, "softmax_rows");
  Tensor out = softmax_kernel(m.value(), tau);
  Tensor probs = out;
  return m.tape().record("softmax_rows", std::move(out), {m}, [m, yv = std::move(probs), tau](Tape& t, const Tensor& g) {
    Tensor* gm = t.grad_slot(m);
    if (!gm) return;
    for (std::size_t r = 0; r < yv.rows(); ++r) {
      auto yr = yv.row(r);
      auto gr = g.row(r);
      double dot = 0.0;
      for (std::size_t c = 0; c < yr.size(); ++c) dot += yr[c] * gr[c];
      auto dst = gm->row(r);
      for (std::size_t c = 0; c < yr.size(); ++c) dst[c] += yr[c] * (gr[c] - dot) / tau;
    }
  });
}

Var log_softmax_rows(Var m, double tau) {
  require_positive_tau(tau, "log_softmax_rows");
  Tensor out = log_softmax_kernel(m.value(), tau);
  return m.tape().record("log_softmax_rows", std::move(out), {m}, [m, tau](Tape& t, const Tensor& g) {
    Tensor* gm = t.grad_slot(m);
    if (!gm) return;
    const Tensor probs = softmax_kernel(m.value(), tau);
    for (std::size_t r = 0; r < probs.rows(); ++r) {
      auto pr = probs.row(r);
      auto gr = g.row(r);
      double total = 0.0;
      for (double v : gr) total += v;
      auto dst = gm->row(r);
      for (std::size_t c = 0; c < pr.size(); ++c) dst[c] += (gr[c] - pr[c] * total) / tau;
    }
  });
}

Var masked_log_softmax_rows(Var m, std::vector<std::uint8_t> include) {
  const Tensor& mv = m.value();
  require_matrix(mv, "masked_log_softmax_rows");
  if (include.size() != mv.size()) fail(ErrorKind::shape, "masked_log_softmax_rows: mask size mismatch");
  const std::size_t cols = mv.cols();
  Tensor out(mv.shape());
  Tensor probs(mv.shape());
  for (std::size_t r = 0; r < mv.rows(); ++r) {
    auto in = mv.row(r);
    const std::uint8_t* keep = include.data() + r * cols;
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) {
      if (keep[c]) top = std::max(top, in[c]);
    }
    if (!std::isfinite(top)) fail(ErrorKind::degenerate_input, "masked_log_softmax_rows: row " + std::to_string(r) + " fully masked");
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      if (keep[c]) total += std::exp(in[c] - top);
    }
    const double lse = top + std::log(total);
    for (std::size_t c = 0; c < cols; ++c) {
      if (keep[c]) {
        out.at(r, c) = in[c] - lse;
        probs.at(r, c) = std::exp(in[c] - lse);
      }
    }
  }
  return m.tape().record("masked_log_softmax_rows", std::move(out), {m},
                         [m, probs = std::move(probs), include = std::move(include)](Tape& t, const Tensor& g) {
                           Tensor* gm = t.grad_slot(m);
                           if (!gm) return;
                           const std::size_t width = probs.cols();
                           for (std::size_t r = 0; r < probs.rows(); ++r) {
                             const std::uint8_t* keep = include.data() + r * width;
                             double total = 0.0;
                             for (std::size_t c = 0; c < width; ++c) {
                               if (keep[c]) total += g.at(r, c);
                             }
                             for (std::size_t c = 0; c < width; ++c) {
                               if (keep[c]) gm->at(r, c) += g.at(r, c) - probs.at(r, c) * total;
                             }
                           }
                         });
}

Var kl_divergence_rows(Var p, Var q) {
  require_same_shape(p.value(), q.value(), "kl_divergence_rows");
  require_distributions(p.value(), "kl_divergence_rows(p)");
  require_distributions(q.value(), "kl_divergence_rows(q)");
  const double value = kl_kernel(p.value(), q.value());
  return p.tape().record("kl_divergence_rows", Tensor::scalar(value), {p, q}, [p, q](Tape& t, const Tensor& g) {
    const Tensor& pv = p.value();
    const Tensor& qv = q.value();
    const double w = g[0] / static_cast<double>(pv.rows());
    if (Tensor* gp = t.grad_slot(p)) {
      for (std::size_t i = 0; i < pv.size(); ++i) {
        if (pv[i] > 0.0) (*gp)[i] += w * (std::log(pv[i]) - std::log(std::max(qv[i], kLogClamp)) + 1.0);
      }
    }
    if (Tensor* gq = t.grad_slot(q)) {
      for (std::size_t i = 0; i < pv.size(); ++i) {
        if (qv[i] > kLogClamp) (*gq)[i] -= w * pv[i] / qv[i];
      }
    }
  });
}

Var nll_mean(Var log_probs, std::span<const int> labels) {
  const Tensor& lp = log_probs.value();
  require_matrix(lp, "nll_mean");
  if (labels.size() != lp.rows()) {
    fail(ErrorKind::shape, "nll_mean: " + std::to_string(labels.size()) + " labels for " + std::to_string(lp.rows()) + " rows");
  }
  const std::size_t k = lp.cols();
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
      fail(ErrorKind::label, "label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(k) + ")");
    }
    total -= lp.at(i, labels[i]);
  }
  const double n = static_cast<double>(labels.size());
  std::vector<int> owned(labels.begin(), labels.end());
  return log_probs.tape().record("nll_mean", Tensor::scalar(total / n), {log_probs},
                                 [log_probs, owned = std::move(owned), n](Tape& t, const Tensor& g) {
                                   if (Tensor* gl = t.grad_slot(log_probs)) {
                                     for (std::size_t i = 0; i < owned.size(); ++i) gl->at(i, owned[i]) -= g[0] / n;
                                   }
                                 });
}

}  // namespace mlkd
