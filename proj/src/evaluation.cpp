// SPDX-License-Identifier: Apache-2.0
#include "mlkd/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "mlkd/autograd.hpp"
#include "mlkd/error.hpp"
#include "mlkd/network.hpp"
#include "mlkd/ops.hpp"
#include "mlkd/rng.hpp"
#include "mlkd/training.hpp"

namespace mlkd {

void to_json(nlohmann::json& j, const EvalReport& r) {
  j = nlohmann::json{{"mode", r.mode}, {"top1", r.top1}, {"n_test", r.n_test}, {"seed", r.seed}};
  if (r.top5) j["top5"] = *r.top5;
  if (!r.per_class.empty()) {
    nlohmann::json per = nlohmann::json::array();
    for (double a : r.per_class) {
      if (std::isnan(a)) per.push_back(nullptr);
      else per.push_back(a);
    }
    j["per_class"] = per;
  }
}

namespace {

void check_labels(const Tensor& logits, std::span<const int> labels, const char* what) {
  require_matrix(logits, what);
  if (labels.empty()) fail(ErrorKind::data, std::string(what) + ": empty batch");
  if (logits.rows() != labels.size()) {
    fail(ErrorKind::shape, std::string(what) + ": " + std::to_string(logits.rows()) + " rows vs " +
                               std::to_string(labels.size()) + " labels");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= logits.cols()) {
      fail(ErrorKind::label, std::string(what) + ": label " + std::to_string(y) + " out of range");
    }
  }
}

std::size_t rank_of_label(std::span<const double> row, std::size_t label) {
  std::size_t ahead = 0;
  for (std::size_t c = 0; c < row.size(); ++c) {
    if (row[c] > row[label] || (row[c] == row[label] && c < label)) ++ahead;
  }
  return ahead;
}

}  // namespace

double top1_accuracy(const Tensor& logits, std::span<const int> labels) { return topk_accuracy(logits, labels, 1); }

double topk_accuracy(const Tensor& logits, std::span<const int> labels, std::size_t k) {
  check_labels(logits, labels, "topk_accuracy");
  if (k == 0) fail(ErrorKind::parameter, "topk_accuracy: k must be positive");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    hits += rank_of_label(logits.row(i), static_cast<std::size_t>(labels[i])) < k ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

std::vector<int> argmax_rows(const Tensor& logits) {
  require_matrix(logits, "argmax_rows");
  std::vector<int> out(logits.rows());
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto row = logits.row(i);
    out[i] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

std::vector<double> per_class_accuracy(std::span<const int> predictions, std::span<const int> labels,
                                       std::size_t num_classes) {
  if (predictions.size() != labels.size()) fail(ErrorKind::shape, "per_class_accuracy: size mismatch");
  std::vector<std::size_t> total(num_classes, 0), hit(num_classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
      fail(ErrorKind::label, "per_class_accuracy: label " + std::to_string(labels[i]) + " out of range");
    }
    ++total[labels[i]];
    hit[labels[i]] += predictions[i] == labels[i] ? 1 : 0;
  }
  std::vector<double> out(num_classes, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (total[c] > 0) out[c] = static_cast<double>(hit[c]) / static_cast<double>(total[c]);
  }
  return out;
}

std::vector<int> knn_classify(const Tensor& train_feats, std::span<const int> train_labels, const Tensor& test_feats,
                              std::size_t k) {
  require_matrix(train_feats, "knn_classify(train)");
  require_matrix(test_feats, "knn_classify(test)");
  const std::size_t n = train_feats.rows();
  if (train_labels.size() != n) fail(ErrorKind::shape, "knn_classify: train labels do not match train features");
  if (train_feats.cols() != test_feats.cols()) fail(ErrorKind::shape, "knn_classify: feature widths differ");
  if (k == 0 || k > n) {
    fail(ErrorKind::parameter, "knn_classify: k=" + std::to_string(k) + " with " + std::to_string(n) + " train points");
  }
  int max_label = 0;
  for (int y : train_labels) {
    if (y < 0) fail(ErrorKind::label, "knn_classify: negative label");
    max_label = std::max(max_label, y);
  }

  const Tensor sims = cosine_similarity_matrix(test_feats, train_feats);
  std::vector<int> out(test_feats.rows());
  std::vector<std::size_t> order(n);
  std::vector<std::size_t> votes(static_cast<std::size_t>(max_label) + 1);
  std::vector<std::size_t> first_seen(votes.size());
  for (std::size_t q = 0; q < out.size(); ++q) {
    auto s = sims.row(q);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) { return s[a] > s[b] || (s[a] == s[b] && a < b); });
    std::fill(votes.begin(), votes.end(), 0);
    std::fill(first_seen.begin(), first_seen.end(), k);
    for (std::size_t r = 0; r < k; ++r) {
      const auto c = static_cast<std::size_t>(train_labels[order[r]]);
      ++votes[c];
      first_seen[c] = std::min(first_seen[c], r);
    }
    std::size_t best = 0;
    for (std::size_t c = 1; c < votes.size(); ++c) {
      if (votes[c] > votes[best] || (votes[c] == votes[best] && first_seen[c] < first_seen[best])) best = c;
    }
    out[q] = static_cast<int>(best);
  }
  return out;
}

void to_json(nlohmann::json& j, const ProbeConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"lr", c.lr},
                     {"lr_decay_epochs", c.lr_decay_epochs},
                     {"lr_decay_factor", c.lr_decay_factor},
                     {"momentum", c.momentum},
                     {"weight_decay", c.weight_decay},
                     {"batch_size", c.batch_size},
                     {"seed", c.seed},
                     {"standardize", c.standardize}};
}

void from_json(const nlohmann::json& j, ProbeConfig& c) {
  if (!j.is_object()) fail(ErrorKind::config, "probe config must be an object");
  for (const auto& [key, value] : j.items()) {
    if (key == "epochs") c.epochs = value.get<std::size_t>();
    else if (key == "lr") c.lr = value.get<double>();
    else if (key == "lr_decay_epochs") c.lr_decay_epochs = value.get<std::vector<std::size_t>>();
    else if (key == "lr_decay_factor") c.lr_decay_factor = value.get<double>();
    else if (key == "momentum") c.momentum = value.get<double>();
    else if (key == "weight_decay") c.weight_decay = value.get<double>();
    else if (key == "batch_size") c.batch_size = value.get<std::size_t>();
    else if (key == "seed") c.seed = value.get<std::uint64_t>();
    else if (key == "standardize") c.standardize = value.get<bool>();
    else fail(ErrorKind::config, "unknown probe config key '" + key + "'");
  }
}

double linear_probe(const Tensor& train_feats, std::span<const int> train_labels, const Tensor& test_feats,
                    std::span<const int> test_labels, const ProbeConfig& config) {
  require_matrix(train_feats, "linear_probe(train)");
  require_matrix(test_feats, "linear_probe(test)");
  if (train_feats.rows() != train_labels.size() || test_feats.rows() != test_labels.size()) {
    fail(ErrorKind::shape, "linear_probe: features and labels differ in length");
  }
  if (train_feats.cols() != test_feats.cols()) fail(ErrorKind::shape, "linear_probe: feature widths differ");
  if (test_labels.empty()) fail(ErrorKind::data, "linear_probe: empty test set");
  if (config.epochs == 0 || config.batch_size == 0 || !(config.lr > 0.0)) {
    fail(ErrorKind::parameter, "linear_probe: epochs, batch_size and lr must be positive");
  }
  int max_label = 0;
  for (auto labels : {train_labels, test_labels}) {
    for (int y : labels) {
      if (y < 0) fail(ErrorKind::label, "linear_probe: negative label");
      max_label = std::max(max_label, y);
    }
  }
  if (train_labels.empty() ||
      std::all_of(train_labels.begin(), train_labels.end(), [&](int y) { return y == train_labels[0]; })) {
    fail(ErrorKind::data, "linear_probe: training set has a single class");
  }
  const std::size_t classes = static_cast<std::size_t>(max_label) + 1;
  const std::size_t d = train_feats.cols();
  const std::size_t n = train_feats.rows();

  Tensor xtr = train_feats;
  Tensor xte = test_feats;
  if (config.standardize) {
    const Eigen::RowVectorXd mu = xtr.matrix().colwise().mean();
    Eigen::RowVectorXd sd = ((xtr.matrix().rowwise() - mu).array().square().colwise().mean()).sqrt();
    for (Eigen::Index f = 0; f < sd.size(); ++f) {
      if (!(sd(f) > 0.0)) sd(f) = 1.0;
    }
    for (Tensor* t : {&xtr, &xte}) {
      auto m = t->matrix();
      m = ((m.rowwise() - mu).array().rowwise() / sd.array()).matrix();
    }
  }

  Rng rng(derive_seed(config.seed, "probe_init"));
  Dense layer = make_dense(d, classes, rng);
  std::vector<Tensor> velocity;
  std::vector<std::size_t> order(n);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    double lr = config.lr;
    for (std::size_t e : config.lr_decay_epochs) {
      if (epoch >= e) lr *= config.lr_decay_factor;
    }
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle(derive_seed(config.seed + epoch, "probe_shuffle"));
    std::shuffle(order.begin(), order.end(), shuffle);
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t count = std::min(config.batch_size, n - start);
      const std::span<const std::size_t> idx(order.data() + start, count);
      std::vector<int> y;
      y.reserve(count);
      for (auto i : idx) y.push_back(train_labels[i]);
      Tape tape;
      BoundDense bound = bind(tape, layer, true);
      Var logits = forward(bound, tape.constant(gather_rows(xtr, idx)));
      tape.backward(nll_mean(log_softmax_rows(logits, 1.0), y));
      const std::vector<Tensor> grads{tape.grad(bound.weight), tape.grad(bound.bias)};
      const std::vector<Tensor*> params = parameters(layer);
      sgd_step(params, grads, velocity, lr, config.momentum, config.weight_decay);
    }
  }
  return top1_accuracy(forward(layer, xte), test_labels);
}

CkaKernel parse_cka_kernel(const std::string& name) {
  if (name == "linear") return CkaKernel::linear;
  if (name == "rbf") return CkaKernel::rbf;
  fail(ErrorKind::config, "unknown CKA kernel '" + name + "' (expected linear or rbf)");
}

namespace {

Eigen::MatrixXd gram(const Tensor& x, CkaKernel kernel, double bandwidth_scale, const char* which) {
  const Eigen::MatrixXd m = x.matrix();
  Eigen::MatrixXd k = m * m.transpose();
  if (kernel == CkaKernel::linear) return k;

  const Eigen::VectorXd sq = k.diagonal();
  Eigen::MatrixXd d2 = (sq.replicate(1, m.rows()) + sq.transpose().replicate(m.rows(), 1) - 2.0 * k).cwiseMax(0.0);
  std::vector<double> dist;
  dist.reserve(static_cast<std::size_t>(m.rows() * (m.rows() - 1) / 2));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < m.rows(); ++j) dist.push_back(std::sqrt(d2(i, j)));
  }
  const auto mid = dist.begin() + static_cast<std::ptrdiff_t>(dist.size() / 2);
  std::nth_element(dist.begin(), mid, dist.end());
  double median = *mid;
  if (dist.size() % 2 == 0) median = 0.5 * (median + *std::max_element(dist.begin(), mid));
  const double sigma = bandwidth_scale * median;
  if (!(sigma > 0.0)) fail(ErrorKind::degenerate_input, std::string("cka_similarity: ") + which + " features are constant");
  return (-d2 / (2.0 * sigma * sigma)).array().exp().matrix();
}

Eigen::MatrixXd center(const Eigen::MatrixXd& k) {
  const Eigen::RowVectorXd col_mean = k.colwise().mean();
  const Eigen::VectorXd row_mean = k.rowwise().mean();
  const double all = k.mean();
  Eigen::MatrixXd c = k;
  c.rowwise() -= col_mean;
  c.colwise() -= row_mean;
  c.array() += all;
  return c;
}

}  // namespace

double cka_similarity(const Tensor& x, const Tensor& y, CkaKernel kernel, double bandwidth_scale) {
  require_matrix(x, "cka_similarity(x)");
  require_matrix(y, "cka_similarity(y)");
  if (x.rows() != y.rows()) fail(ErrorKind::shape, "cka_similarity: sample counts differ");
  if (x.rows() < 3) fail(ErrorKind::degenerate_input, "cka_similarity: needs at least 3 samples");
  if (!(bandwidth_scale > 0.0)) fail(ErrorKind::parameter, "cka_similarity: bandwidth scale must be positive");
  const Eigen::MatrixXd kx = gram(x, kernel, bandwidth_scale, "x");
  const Eigen::MatrixXd ky = gram(y, kernel, bandwidth_scale, "y");
  const Eigen::MatrixXd cx = center(kx);
  const Eigen::MatrixXd cy = center(ky);
  const double xx = cx.cwiseProduct(cx).sum();
  const double yy = cy.cwiseProduct(cy).sum();
  // Centring a constant kernel leaves only rounding noise.
  if (!(xx > 1e-20 * kx.squaredNorm())) fail(ErrorKind::degenerate_input, "cka_similarity: x features are constant");
  if (!(yy > 1e-20 * ky.squaredNorm())) fail(ErrorKind::degenerate_input, "cka_similarity: y features are constant");
  const double xy = cx.cwiseProduct(cy).sum();
  return std::clamp(xy / std::sqrt(xx * yy), 0.0, 1.0);
}

}  // namespace mlkd
