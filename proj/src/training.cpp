// SPDX-License-Identifier: Apache-2.0
#include "mlkd/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "binary_io.hpp"
#include "mlkd/error.hpp"
#include "mlkd/ops.hpp"
#include "mlkd/rng.hpp"

namespace mlkd {

// ---- Config -------------------------------------------------------------------

void DistillConfig::validate() const {
  if (epochs == 0) fail(ErrorKind::config, "epochs must be positive");
  if (batch_size < 2) fail(ErrorKind::config, "batch_size must be at least 2");
  if (!(initial_lr > 0.0)) fail(ErrorKind::config, "initial_lr must be positive");
  if (!(lr_decay_factor > 0.0)) fail(ErrorKind::config, "lr_decay_factor must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) fail(ErrorKind::config, "momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) fail(ErrorKind::config, "weight_decay must be nonnegative");
  if (!(transform_multiplier > 0.0)) fail(ErrorKind::config, "transform_multiplier must be positive");
  if (!(few_shot_fraction > 0.0 && few_shot_fraction <= 1.0)) {
    fail(ErrorKind::config, "few_shot_fraction must lie in (0, 1]");
  }
  if (!(jitter_scale >= 0.0)) fail(ErrorKind::config, "jitter_scale must be nonnegative");
  weights.validate();
}

void to_json(nlohmann::json& j, const DistillConfig& c) {
  j = nlohmann::json{{"seed", c.seed},
                     {"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"initial_lr", c.initial_lr},
                     {"lr_decay_epochs", c.lr_decay_epochs},
                     {"lr_decay_factor", c.lr_decay_factor},
                     {"momentum", c.momentum},
                     {"weight_decay", c.weight_decay},
                     {"loss_weights", c.weights},
                     {"transform_multiplier", c.transform_multiplier},
                     {"teacher_kind", to_string(c.teacher_kind)},
                     {"few_shot_fraction", c.few_shot_fraction},
                     {"jitter_scale", c.jitter_scale},
                     {"teacher_arch", c.teacher_arch},
                     {"student_arch", c.student_arch}};
}

void from_json(const nlohmann::json& j, DistillConfig& c) {
  DistillConfig out;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "seed") out.seed = value.get<std::uint64_t>();
      else if (key == "epochs") out.epochs = value.get<std::size_t>();
      else if (key == "batch_size") out.batch_size = value.get<std::size_t>();
      else if (key == "initial_lr") out.initial_lr = value.get<double>();
      else if (key == "lr_decay_epochs") out.lr_decay_epochs = value.get<std::vector<std::size_t>>();
      else if (key == "lr_decay_factor") out.lr_decay_factor = value.get<double>();
      else if (key == "momentum") out.momentum = value.get<double>();
      else if (key == "weight_decay") out.weight_decay = value.get<double>();
      else if (key == "loss_weights") out.weights = value.get<LossWeights>();
      else if (key == "transform_multiplier") out.transform_multiplier = value.get<double>();
      else if (key == "teacher_kind") out.teacher_kind = parse_teacher_kind(value.get<std::string>());
      else if (key == "few_shot_fraction") out.few_shot_fraction = value.get<double>();
      else if (key == "jitter_scale") out.jitter_scale = value.get<double>();
      else if (key == "teacher_arch") out.teacher_arch = value.get<ArchSpec>();
      else if (key == "student_arch") out.student_arch = value.get<ArchSpec>();
      else fail(ErrorKind::config, "unknown config key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config, std::string("invalid config value: ") + e.what());
  }
  c = out;
}

// ---- Log ----------------------------------------------------------------------

std::string TrainLog::to_csv() const {
  std::string out = std::string(kCsvHeader) + "\n";
  char line[512];
  for (const auto& r : epochs) {
    std::snprintf(line, sizeof line, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.6f\n", r.epoch, r.lr,
                  r.losses.align, r.losses.corr, r.losses.sup, r.losses.ce, r.losses.kd, r.losses.total, r.train_acc,
                  r.eval_acc, r.seconds);
    out += line;
  }
  return out;
}

void TrainLog::save_csv(const std::filesystem::path& path) const { detail::write_file(path, to_csv()); }

// ---- Optimizer ----------------------------------------------------------------

void sgd_step(std::span<Tensor* const> params, std::span<const Tensor> grads, std::vector<Tensor>& velocity, double lr,
              double momentum, double weight_decay) {
  if (params.size() != grads.size()) fail(ErrorKind::shape, "sgd_step: parameter/gradient count mismatch");
  if (!(lr > 0.0)) fail(ErrorKind::parameter, "sgd_step: learning rate must be positive");
  if (velocity.empty()) {
    for (const Tensor* p : params) velocity.push_back(Tensor::zeros(p->shape()));
  }
  if (velocity.size() != params.size()) fail(ErrorKind::shape, "sgd_step: velocity count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = grads[i];
    Tensor& v = velocity[i];
    require_same_shape(p, g, "sgd_step");
    require_same_shape(p, v, "sgd_step velocity");
    for (std::size_t k = 0; k < p.size(); ++k) {
      v[k] = momentum * v[k] + (g[k] + weight_decay * p[k]);
      p[k] -= lr * v[k];
    }
  }
}

double lr_schedule(std::size_t epoch, const DistillConfig& config) {
  int decays = 0;
  for (auto e : config.lr_decay_epochs) decays += e <= epoch ? 1 : 0;
  return config.initial_lr * std::pow(config.lr_decay_factor, decays);
}

// ---- Augmentation -------------------------------------------------------------

Tensor rotate_quarter_turns(const Tensor& images, int k) {
  const bool single = images.rank() == 3;
  if (!single && images.rank() != 4) fail(ErrorKind::augmentation, "rotation needs C x H x W samples");
  const std::size_t h = images.dim(images.rank() - 2);
  const std::size_t w = images.dim(images.rank() - 1);
  if (h != w) fail(ErrorKind::augmentation, "rotation needs square images, got " + shape_string(images.shape()));
  k = ((k % 4) + 4) % 4;
  Tensor out(images.shape());
  const std::size_t planes = images.size() / (h * w);
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = images.values().data() + p * h * w;
    double* dst = out.values().data() + p * h * w;
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t c = 0; c < w; ++c) {
        std::size_t sr = r, sc = c;
        // Counter-clockwise: new(r, c) = old(c, n-1-r), applied k times.
        for (int t = 0; t < k; ++t) {
          const std::size_t nr = sc, nc = h - 1 - sr;
          sr = nr;
          sc = nc;
        }
        dst[r * w + c] = src[sr * w + sc];
      }
    }
  }
  return out;
}

Augmentation augment(const Tensor& batch, std::uint64_t seed, const AugmentOptions& options) {
  Augmentation out;
  const std::size_t n = batch.rows();
  const bool image = batch.rank() == 4;
  AugmentMode mode = options.mode;
  if (mode == AugmentMode::automatic) mode = image ? AugmentMode::rotate : AugmentMode::jitter;
  Rng rng(seed);

  if (mode == AugmentMode::rotate) {
    if (!image || batch.dim(2) != batch.dim(3)) {
      fail(ErrorKind::augmentation, "rotation requested for non-square input " + shape_string(batch.shape()));
    }
    std::uniform_int_distribution<int> turn(0, 3);
    const Shape sample_shape(batch.shape().begin() + 1, batch.shape().end());
    const std::size_t width = batch.cols();
    out.batch = Tensor(batch.shape());
    for (std::size_t i = 0; i < n; ++i) {
      const int k = turn(rng);
      out.quarter_turns.push_back(k);
      Tensor sample(sample_shape, std::vector<double>(batch.row(i).begin(), batch.row(i).end()));
      Tensor rotated = rotate_quarter_turns(sample, k);
      std::copy(rotated.values().begin(), rotated.values().end(), out.batch.values().begin() + i * width);
    }
    out.overlap.assign(n * batch.dim(2) * batch.dim(3), 1);
    return out;
  }

  const std::size_t width = batch.cols();
  std::vector<double> std_dev = options.feature_std;
  if (std_dev.empty()) {
    std_dev.assign(width, 0.0);
    const auto m = batch.flattened().matrix();
    const Eigen::RowVectorXd mu = m.colwise().mean();
    for (std::size_t f = 0; f < width; ++f) {
      const double var = (m.col(Eigen::Index(f)).array() - mu(Eigen::Index(f))).square().mean();
      std_dev[f] = std::sqrt(var);
    }
  }
  if (std_dev.size() != width) fail(ErrorKind::augmentation, "feature_std width does not match the batch");
  std::normal_distribution<double> normal(0.0, 1.0);
  out.batch = batch;
  for (std::size_t i = 0; i < n; ++i) {
    auto row = out.batch.row(i);
    for (std::size_t f = 0; f < width; ++f) row[f] += options.jitter_scale * std_dev[f] * normal(rng);
  }
  out.quarter_turns.assign(n, 0);
  out.overlap.assign(n * width, 1);
  return out;
}

Dataset subsample(const Dataset& ds, double fraction, std::uint64_t seed) {
  const auto idx = stratified_sample(ds, fraction, seed);
  return ds.subset(idx);
}

// ---- Training loop ------------------------------------------------------------

namespace {

// Dead-ReLU samples can produce exactly zero representations; normalize them to
// a fixed direction instead of aborting the run.
constexpr double kNormEps = 1e-12;

struct ActiveTerms {
  bool align = false, corr = false, sup = false, ce = false, kd = false;
  bool needs_view() const { return corr || sup; }
  bool needs_teacher() const { return align || corr || sup || kd; }
};

std::size_t argmax_row(std::span<const double> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

double accuracy(const Tensor& logits, std::span<const int> labels) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    hits += argmax_row(logits.row(i)) == static_cast<std::size_t>(labels[i]) ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

double eval_accuracy(const Network& net, const Dataset* eval) {
  if (!eval || !eval->has_labels() || !net.has_projection()) return std::numeric_limits<double>::quiet_NaN();
  return accuracy(forward_logits(net, forward_features(net, eval->inputs)), eval->labels);
}

std::vector<double> feature_std(const Tensor& inputs) {
  const auto m = inputs.flattened().matrix();
  const Eigen::RowVectorXd mu = m.colwise().mean();
  std::vector<double> out(inputs.cols());
  for (std::size_t f = 0; f < out.size(); ++f) {
    out[f] = std::sqrt((m.col(Eigen::Index(f)).array() - mu(Eigen::Index(f))).square().mean());
  }
  return out;
}

struct StudentState {
  Network net;
  TransformHead align_head;
  TransformHead corr_head;
  Dense sup_projection;
};

TrainResult run(const DistillConfig& config, const ArchSpec& arch, const Network* teacher, TeacherKind kind,
                const ActiveTerms& terms, const Dataset& train_full, const Dataset* eval) {
  config.validate();
  const Dataset train =
      config.few_shot_fraction < 1.0 ? subsample(train_full, config.few_shot_fraction, config.seed) : train_full;
  if (train.size() < 2) fail(ErrorKind::data, "training set needs at least two samples");
  if ((terms.ce || terms.sup) && !train.has_labels()) fail(ErrorKind::data, "supervised terms need labels");
  if (shape_size(train.sample_shape()) != arch.input_dim()) {
    fail(ErrorKind::config, "dataset sample shape " + shape_string(train.sample_shape()) + " does not match network input " +
                                shape_string(arch.input_shape));
  }

  StudentState st;
  st.net = init_network(arch, derive_seed(config.seed, "init"));
  if (terms.ce && !st.net.has_projection()) fail(ErrorKind::config, "cross-entropy needs a student with num_classes");
  if (terms.ce && st.net.num_classes() < train.num_classes) {
    fail(ErrorKind::config, "student projection has fewer outputs than the dataset has classes");
  }
  const std::size_t ds_dim = st.net.feature_dim();
  const std::size_t dt_dim = teacher ? teacher->feature_dim() : ds_dim;
  st.align_head = make_transform_head(ds_dim, dt_dim, config.transform_multiplier, derive_seed(config.seed, "align_head"));
  st.corr_head = make_mlp_head(ds_dim, ds_dim, ds_dim, derive_seed(config.seed, "corr_head"));
  {
    Rng rng(derive_seed(config.seed, "sup_projection"));
    st.sup_projection = make_dense(ds_dim, dt_dim, rng);
  }

  std::vector<Tensor*> params = parameters(st.net);
  if (terms.align) {
    for (Tensor* t : parameters(st.align_head)) params.push_back(t);
  }
  if (terms.corr) {
    for (Tensor* t : parameters(st.corr_head)) params.push_back(t);
  }
  if (terms.sup) {
    for (Tensor* t : parameters(st.sup_projection)) params.push_back(t);
  }
  std::vector<Tensor> velocity;

  AugmentOptions aug;
  aug.jitter_scale = config.jitter_scale;
  if (!train.is_image()) aug.feature_std = feature_std(train.inputs);

  TrainLog log;
  const std::size_t n = train.size();
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    const double lr = lr_schedule(epoch, config);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(derive_seed(config.seed + epoch, "shuffle"));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double sum_align = 0.0, sum_corr = 0.0, sum_sup = 0.0, sum_ce = 0.0, sum_kd = 0.0;
    std::size_t hits = 0;
    std::size_t seen = 0;
    for (std::size_t start = 0, step = 0; start < n; start += config.batch_size, ++step) {
      const std::size_t count = std::min(config.batch_size, n - start);
      if (count < 2) break;
      const std::span<const std::size_t> idx(order.data() + start, count);
      const Tensor x = gather_rows(train.inputs, idx);
      std::vector<int> y;
      if (train.has_labels()) {
        for (auto i : idx) y.push_back(train.labels[i]);
      }

      Tape tape;
      std::vector<Var> leaves;
      BoundNetwork student = bind(tape, st.net, true);
      for (Var v : parameters(student)) leaves.push_back(v);
      std::optional<BoundHead> align_head, corr_head;
      std::optional<BoundDense> sup_projection;
      if (terms.align) {
        align_head = bind(tape, st.align_head, true);
        for (Var v : parameters(*align_head)) leaves.push_back(v);
      }
      if (terms.corr) {
        corr_head = bind(tape, st.corr_head, true);
        for (Var v : parameters(*corr_head)) leaves.push_back(v);
      }
      if (terms.sup) {
        sup_projection = bind(tape, st.sup_projection, true);
        for (Var v : parameters(*sup_projection)) leaves.push_back(v);
      }

      Tensor x_view;
      if (terms.needs_view()) x_view = augment(x, derive_seed(config.seed, "view", epoch * 1000003 + step), aug).batch;

      Tensor z_t, z_t_view, logits_t;
      if (terms.needs_teacher()) {
        z_t = forward_features(*teacher, x);
        if (terms.needs_view()) z_t_view = forward_features(*teacher, x_view);
        if (terms.kd) logits_t = forward_logits(*teacher, z_t);
      }

      Var z_s = forward_features(student, tape.constant(x.flattened()));
      Var z_s_view;
      if (terms.needs_view()) z_s_view = forward_features(student, tape.constant(x_view.flattened()));
      std::optional<Var> logits_s;
      if (st.net.has_projection() && train.has_labels()) logits_s = forward_logits(student, z_s);

      LossTerms loss_terms;
      if (terms.align) loss_terms.align = loss_align(z_s, z_t, *align_head);
      if (terms.corr) {
        loss_terms.corr = loss_corr(z_t_view, z_t, apply_head(*corr_head, z_s_view), apply_head(*corr_head, z_s),
                                    config.weights.tau_corr, kNormEps);
      }
      if (terms.sup) {
        Var p = l2_normalize_rows(forward(*sup_projection, z_s), kNormEps);
        Var p_view = l2_normalize_rows(forward(*sup_projection, z_s_view), kNormEps);
        Var t_unit = tape.constant(l2_normalize_rows(z_t, kNormEps));
        Var t_bank = tape.constant(l2_normalize_rows(concat_rows(z_t, z_t_view), kNormEps));
        std::vector<int> bank_labels = y;
        bank_labels.insert(bank_labels.end(), y.begin(), y.end());
        Var student_anchor = loss_sup(p, t_bank, bank_labels, config.weights.tau_sup, AnchorMode::student);
        Var teacher_anchor =
            loss_sup(t_unit, concat_rows(p, p_view), bank_labels, config.weights.tau_sup, AnchorMode::teacher);
        loss_terms.sup = scale(add(student_anchor, teacher_anchor), 0.5);
      }
      if (terms.ce) loss_terms.ce = loss_ce(*logits_s, y);
      if (terms.kd) loss_terms.kd = loss_kd(logits_t, *logits_s, config.weights.kd_temperature);

      TotalLoss total = loss_total(loss_terms, config.weights, kind);
      tape.backward(total.total);

      std::vector<Tensor> grads;
      grads.reserve(leaves.size());
      for (Var v : leaves) grads.push_back(tape.grad(v));
      sgd_step(params, grads, velocity, lr, config.momentum, config.weight_decay);

      const double w = static_cast<double>(count);
      sum_align += w * total.breakdown.align;
      sum_corr += w * total.breakdown.corr;
      sum_sup += w * total.breakdown.sup;
      sum_ce += w * total.breakdown.ce;
      sum_kd += w * total.breakdown.kd;
      if (logits_s) {
        for (std::size_t i = 0; i < count; ++i) {
          hits += argmax_row(logits_s->value().row(i)) == static_cast<std::size_t>(y[i]) ? 1 : 0;
        }
      }
      seen += count;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    const double denom = static_cast<double>(std::max<std::size_t>(seen, 1));
    LossValues means;
    if (terms.align) means.align = sum_align / denom;
    if (terms.corr) means.corr = sum_corr / denom;
    if (terms.sup) means.sup = sum_sup / denom;
    if (terms.ce) means.ce = sum_ce / denom;
    if (terms.kd) means.kd = sum_kd / denom;
    rec.losses = loss_total(means, config.weights, kind);
    rec.train_acc = st.net.has_projection() && train.has_labels() ? static_cast<double>(hits) / denom
                                                                   : std::numeric_limits<double>::quiet_NaN();
    rec.eval_acc = eval_accuracy(st.net, eval);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    log.epochs.push_back(rec);
  }

  TrainResult result;
  result.checkpoint.network = std::move(st.net);
  if (terms.align) result.checkpoint.head = std::move(st.align_head);
  result.checkpoint.seed = config.seed;
  result.checkpoint.epochs = config.epochs;
  result.log = std::move(log);
  return result;
}

}  // namespace

TrainResult pretrain_teacher(const DistillConfig& config, const Dataset& train, const Dataset* eval) {
  if (train.size() == 0) fail(ErrorKind::data, "empty training set");
  if (!train.has_labels()) fail(ErrorKind::data, "teacher pretraining needs labels");
  ActiveTerms terms;
  terms.ce = true;
  DistillConfig cfg = config;
  cfg.weights.lambda_align = cfg.weights.lambda_corr = cfg.weights.w_sup = cfg.weights.w_kd = 0.0;
  cfg.weights.w_ce = 1.0;
  return run(cfg, config.teacher_arch, nullptr, TeacherKind::supervised, terms, train, eval);
}

TrainResult distill(const DistillConfig& config, const Checkpoint& teacher, const Dataset& train, const Dataset* eval) {
  if (train.size() == 0) fail(ErrorKind::data, "empty training set");
  const Network& t = teacher.network;
  if (t.arch.input_dim() != config.student_arch.input_dim()) {
    fail(ErrorKind::config, "teacher input " + shape_string(t.arch.input_shape) + " and student input " +
                                shape_string(config.student_arch.input_shape) + " differ");
  }
  const LossWeights& w = config.weights;
  ActiveTerms terms;
  terms.align = w.lambda_align > 0.0;
  terms.corr = w.lambda_corr > 0.0;
  if (config.teacher_kind == TeacherKind::supervised) {
    if (!t.has_projection()) fail(ErrorKind::config, "supervised teacher_kind needs a teacher with a projection");
    terms.sup = w.w_sup > 0.0;
    terms.ce = w.w_ce > 0.0;
    terms.kd = w.w_kd > 0.0;
  }
  if (!(terms.align || terms.corr || terms.sup || terms.ce || terms.kd)) {
    fail(ErrorKind::config, "all loss weights are zero");
  }
  return run(config, config.student_arch, &t, config.teacher_kind, terms, train, eval);
}

}  // namespace mlkd
