// SPDX-License-Identifier: Apache-2.0
#include "mlkd/quantification.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>

#include "binary_io.hpp"
#include "mlkd/error.hpp"
#include "mlkd/log.hpp"
#include "mlkd/ops.hpp"
#include "mlkd/rng.hpp"
#include "mlkd/training.hpp"

namespace mlkd {

void EntropyConfig::validate() const {
  if (draws == 0) fail(ErrorKind::parameter, "entropy: draws must be positive");
  if (!(beta > 0.0) || !(epsilon_fraction > 0.0) || !(step_size > 0.0)) {
    fail(ErrorKind::parameter, "entropy: beta, epsilon_fraction and step_size must be positive");
  }
  if (!(init_fraction > 0.0) || !(cap_fraction > init_fraction)) {
    fail(ErrorKind::parameter, "entropy: need 0 < init_fraction < cap_fraction");
  }
}

void to_json(nlohmann::json& j, const EntropyConfig& c) {
  j = nlohmann::json{{"draws", c.draws},
                     {"steps", c.steps},
                     {"beta", c.beta},
                     {"epsilon_fraction", c.epsilon_fraction},
                     {"step_size", c.step_size},
                     {"init_fraction", c.init_fraction},
                     {"cap_fraction", c.cap_fraction},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, EntropyConfig& c) {
  if (!j.is_object()) fail(ErrorKind::config, "entropy config must be an object");
  for (const auto& [key, value] : j.items()) {
    if (key == "draws") c.draws = value.get<std::size_t>();
    else if (key == "steps") c.steps = value.get<std::size_t>();
    else if (key == "beta") c.beta = value.get<double>();
    else if (key == "epsilon_fraction") c.epsilon_fraction = value.get<double>();
    else if (key == "step_size") c.step_size = value.get<double>();
    else if (key == "init_fraction") c.init_fraction = value.get<double>();
    else if (key == "cap_fraction") c.cap_fraction = value.get<double>();
    else if (key == "seed") c.seed = value.get<std::uint64_t>();
    else fail(ErrorKind::config, "unknown entropy config key '" + key + "'");
  }
}

EntropyMap entropy_map_from_sigma(const Tensor& sigma) {
  EntropyMap map;
  map.sigma = sigma;
  map.entropy = Tensor(sigma.shape());
  double total = 0.0;
  for (std::size_t i = 0; i < sigma.size(); ++i) {
    const double s = sigma[i];
    if (!(s > 0.0) || !std::isfinite(s)) {
      fail(ErrorKind::parameter, "entropy map: sigma[" + std::to_string(i) + "] must be positive and finite");
    }
    map.entropy[i] = std::log(s) + kGaussianEntropyConstant;
    total += map.entropy[i];
  }
  map.mean_entropy = total / static_cast<double>(sigma.size());
  map.concept_mask.resize(sigma.size());
  for (std::size_t i = 0; i < sigma.size(); ++i) map.concept_mask[i] = map.mean_entropy > map.entropy[i] ? 1 : 0;
  return map;
}

double average_entropy(const EntropyMap& map) {
  double total = 0.0;
  for (double h : map.entropy.values()) total += h;
  return total / static_cast<double>(map.entropy.size());
}

namespace {

double softplus(double r) { return r > 30.0 ? r : std::log1p(std::exp(r)); }
double softplus_inverse(double s) { return s > 30.0 ? s + std::log(-std::expm1(-s)) : std::log(std::expm1(s)); }
double sigmoid(double r) { return 1.0 / (1.0 + std::exp(-r)); }

struct Draws {
  Tensor noise;     // M x P, rows m and m + M/2 are antithetic
  Tensor perturbed; // x + sigma * noise
};

// Antithetic pairs with every pixel's empirical second moment rescaled to 1.
Draws make_draws(const Tensor& x, std::span<const double> sigma, std::size_t m, std::uint64_t seed) {
  const std::size_t p = x.size();
  const std::size_t half = m / 2;
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Draws d{Tensor({m, p}), Tensor({m, p})};
  for (std::size_t r = 0; r < half; ++r) {
    for (std::size_t i = 0; i < p; ++i) d.noise.at(r, i) = normal(rng);
  }
  for (std::size_t i = 0; i < p; ++i) {
    double m2 = 0.0;
    for (std::size_t r = 0; r < half; ++r) m2 += d.noise.at(r, i) * d.noise.at(r, i);
    m2 /= static_cast<double>(half);
    const double norm = m2 > 0.0 ? 1.0 / std::sqrt(m2) : 1.0;
    for (std::size_t r = 0; r < half; ++r) {
      d.noise.at(r, i) *= norm;
      d.noise.at(r + half, i) = -d.noise.at(r, i);
    }
  }
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t i = 0; i < p; ++i) d.perturbed.at(r, i) = x[i] + sigma[i] * d.noise.at(r, i);
  }
  return d;
}

Tensor repeat_row(const Tensor& row, std::size_t m) {
  Tensor out({m, row.size()});
  for (std::size_t r = 0; r < m; ++r) std::copy(row.values().begin(), row.values().end(), out.row(r).begin());
  return out;
}

// Mean squared feature distortion over the draws; fills d/dsigma when asked.
double distortion(const FeatureFn& f, const Draws& d, const Tensor& fx_rows, std::vector<double>* dsigma) {
  Tape tape;
  Var input = dsigma ? tape.leaf(d.perturbed) : tape.constant(d.perturbed);
  Var feats = f(tape, input);
  if (feats.value().shape() != fx_rows.shape()) fail(ErrorKind::shape, "entropy: feature function changed its output shape");
  Var diff = sub(feats, tape.constant(fx_rows));
  Var loss = scale(sum(mul(diff, diff)), 1.0 / static_cast<double>(fx_rows.rows()));
  const double value = loss.value().item();
  if (dsigma) {
    tape.backward(loss);
    const Tensor g = tape.grad(input);
    std::fill(dsigma->begin(), dsigma->end(), 0.0);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      for (std::size_t i = 0; i < dsigma->size(); ++i) (*dsigma)[i] += g.at(r, i) * d.noise.at(r, i);
    }
  }
  return value;
}

}  // namespace

EntropyMap estimate_pixel_entropy(const FeatureFn& f, const Tensor& image, const EntropyConfig& config) {
  config.validate();
  if (!image.all_finite()) fail(ErrorKind::parameter, "entropy: image contains non-finite values");
  const std::size_t p = image.size();
  const Tensor x = image.reshaped({1, p});

  Tensor fx;
  {
    Tape tape;
    fx = f(tape, tape.constant(x)).value();
  }
  if (fx.rows() != 1) fail(ErrorKind::shape, "entropy: feature function must map one row to one row");
  double fx_sq = 0.0;
  for (double v : fx.values()) fx_sq += v * v;
  const double eps = config.epsilon_fraction * fx_sq;

  double mean = 0.0;
  for (double v : x.values()) mean += v;
  mean /= static_cast<double>(p);
  double var = 0.0;
  for (double v : x.values()) var += (v - mean) * (v - mean);
  double spread = std::sqrt(var / static_cast<double>(p));
  if (!(spread > 0.0)) spread = 1.0;

  const std::size_t m = std::max<std::size_t>(2, config.draws + config.draws % 2);
  const Tensor fx_rows = repeat_row(fx, m);
  const double rho_max = softplus_inverse(config.cap_fraction * spread);
  std::vector<double> rho(p, softplus_inverse(config.init_fraction * spread));
  std::vector<double> sigma(p);
  std::vector<double> dsigma(p);

  for (std::size_t step = 0; step < config.steps; ++step) {
    for (std::size_t i = 0; i < p; ++i) sigma[i] = softplus(rho[i]);
    const Draws d = make_draws(x, sigma, m, derive_seed(config.seed, "entropy_draws", step));
    // The penalty is flat below eps, so its gradient is only needed above it.
    const double dist = distortion(f, d, fx_rows, nullptr);
    const bool active = dist > eps;
    if (active) distortion(f, d, fx_rows, &dsigma);
    for (std::size_t i = 0; i < p; ++i) {
      double g = 1.0 / sigma[i];
      if (active) g -= config.beta * dsigma[i];
      rho[i] = std::min(rho_max, rho[i] + config.step_size * g * sigmoid(rho[i]));
    }
  }

  Tensor final_sigma(image.shape());
  for (std::size_t i = 0; i < p; ++i) final_sigma[i] = softplus(rho[i]);
  EntropyMap map = entropy_map_from_sigma(final_sigma);
  const Draws check = make_draws(x, final_sigma.values(), m, derive_seed(config.seed, "entropy_final"));
  map.epsilon = eps;
  map.violation = std::max(0.0, distortion(f, check, fx_rows, nullptr) - eps);
  map.converged = map.violation <= 2.0 * eps;
  if (!map.converged) {
    log_warning("entropy: distortion constraint violated by " + std::to_string(map.violation) + " (eps " +
                std::to_string(eps) + ") after " + std::to_string(config.steps) + " steps");
  }
  return map;
}

EntropyMap estimate_pixel_entropy(const Network& net, const Tensor& image, const EntropyConfig& config) {
  if (image.size() != net.arch.input_dim()) {
    fail(ErrorKind::shape, "entropy: image " + shape_string(image.shape()) + " does not match network input " +
                               shape_string(net.arch.input_shape));
  }
  const FeatureFn f = [&net](Tape& tape, Var x) { return forward_features(bind(tape, net, false), x); };
  return estimate_pixel_entropy(f, image, config);
}

EntropyMap rotate_map(const EntropyMap& map, int quarter_turns) {
  if (map.sigma.rank() != 3) fail(ErrorKind::shape, "rotate_map: expected a C x H x W map");
  EntropyMap out = entropy_map_from_sigma(rotate_quarter_turns(map.sigma, quarter_turns));
  out.converged = map.converged;
  out.violation = map.violation;
  out.epsilon = map.epsilon;
  return out;
}

IouResult iou_masks(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b,
                    std::span<const std::uint8_t> overlap) {
  if (a.size() != b.size() || a.size() != overlap.size()) fail(ErrorKind::shape, "iou: mask sizes differ");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!overlap[i]) continue;
    inter += (a[i] && b[i]) ? 1 : 0;
    uni += (a[i] || b[i]) ? 1 : 0;
  }
  if (uni == 0) return {0.0, true};
  return {static_cast<double>(inter) / static_cast<double>(uni), false};
}

IouResult iou_consistency(const EntropyMap& a, const EntropyMap& b, std::span<const std::uint8_t> overlap) {
  if (a.sigma.shape() != b.sigma.shape()) fail(ErrorKind::shape, "iou: map shapes differ");
  return iou_masks(a.concept_mask, b.concept_mask, overlap);
}

IouResult iou_consistency(const EntropyMap& a, const EntropyMap& b) {
  const std::vector<std::uint8_t> full(a.concept_mask.size(), 1);
  return iou_consistency(a, b, full);
}

void to_json(nlohmann::json& j, const QuantifyReport& r) {
  nlohmann::json images = nlohmann::json::array();
  for (const auto& im : r.images) {
    images.push_back({{"index", im.index},
                      {"turns", {im.turns_a, im.turns_b}},
                      {"mean_entropy", im.mean_entropy},
                      {"iou", im.iou.iou},
                      {"iou_degenerate", im.iou.degenerate},
                      {"converged", im.converged}});
  }
  j = nlohmann::json{{"mean_entropy", r.mean_entropy}, {"mean_iou", r.mean_iou}, {"degenerate", r.degenerate},
                     {"unconverged", r.unconverged},   {"images", images}};
}

QuantifyReport quantify_dataset(const Network& net, const Dataset& images, std::size_t count,
                                const EntropyConfig& config) {
  if (!images.is_image()) fail(ErrorKind::data, "quantify: dataset must hold C x H x W images");
  const Shape sample = images.sample_shape();
  if (sample[1] != sample[2]) fail(ErrorKind::data, "quantify: rotations need square images");
  count = std::min(count, images.size());
  if (count == 0) fail(ErrorKind::data, "quantify: no images selected");

  QuantifyReport report;
  for (std::size_t n = 0; n < count; ++n) {
    Tensor image(sample);
    const auto row = images.inputs.row(n);
    std::copy(row.begin(), row.end(), image.values().begin());

    Rng rng(derive_seed(config.seed, "views", n));
    const int ka = static_cast<int>(rng() % 4);
    const int kb = (ka + 1 + static_cast<int>(rng() % 3)) % 4;
    EntropyMap maps[2];
    const int turns[2] = {ka, kb};
    for (int v = 0; v < 2; ++v) {
      EntropyConfig cfg = config;
      cfg.seed = derive_seed(config.seed, "entropy", n * 4 + static_cast<std::size_t>(turns[v]));
      const EntropyMap m = estimate_pixel_entropy(net, rotate_quarter_turns(image, turns[v]), cfg);
      maps[v] = rotate_map(m, (4 - turns[v]) % 4);
    }
    ImageQuantification q;
    q.index = n;
    q.turns_a = ka;
    q.turns_b = kb;
    q.mean_entropy = maps[0].mean_entropy;
    q.iou = iou_consistency(maps[0], maps[1]);
    q.converged = maps[0].converged && maps[1].converged;
    report.mean_entropy += q.mean_entropy;
    report.mean_iou += q.iou.iou;
    report.degenerate += q.iou.degenerate ? 1 : 0;
    report.unconverged += q.converged ? 0 : 1;
    report.images.push_back(q);
  }
  report.mean_entropy /= static_cast<double>(count);
  report.mean_iou /= static_cast<double>(count);
  return report;
}

std::string entropy_map_csv(const EntropyMap& map) {
  std::string out = "pixel,sigma,entropy,concept\n";
  char line[128];
  for (std::size_t i = 0; i < map.sigma.size(); ++i) {
    std::snprintf(line, sizeof line, "%zu,%.17g,%.17g,%d\n", i, map.sigma[i], map.entropy[i],
                  static_cast<int>(map.concept_mask[i]));
    out += line;
  }
  return out;
}

void save_entropy_map_csv(const EntropyMap& map, const std::filesystem::path& path) {
  detail::write_file(path, entropy_map_csv(map));
}

}  // namespace mlkd
