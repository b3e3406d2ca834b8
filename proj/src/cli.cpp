// SPDX-License-Identifier: Apache-2.0
#include "mlkd/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "binary_io.hpp"
#include "mlkd/error.hpp"
#include "mlkd/experiments.hpp"
#include "mlkd/info_bound.hpp"
#include "mlkd/rng.hpp"

namespace mlkd {

using nlohmann::json;

// ---- Config -----------------------------------------------------------------

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) fail(ErrorKind::config, where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* k) { return key == k; })) {
      fail(ErrorKind::config, "unknown key '" + key + "' in " + where);
    }
  }
}

}  // namespace

void to_json(json& j, const ExperimentConfig& c) {
  j = json{{"distill", c.distill},
           {"data", {{"generator", c.data.generator}, {"seed", c.data.seed}, {"split", c.data.split}}},
           {"eval",
            {{"mode", c.eval.mode},
             {"k", c.eval.k},
             {"cka_kernel", c.eval.cka_kernel},
             {"cka_bandwidth_scale", c.eval.cka_bandwidth_scale}}},
           {"probe", c.probe},
           {"quantify", {{"count", c.quantify.count}, {"entropy", c.quantify.entropy}}},
           {"sweep", {{"fractions", c.sweep.fractions}, {"seeds", c.sweep.seeds}}},
           {"output_dir", c.output_dir}};
}

void from_json(const json& j, ExperimentConfig& c) {
  reject_unknown(j, {"distill", "data", "eval", "probe", "quantify", "sweep", "output_dir"}, "experiment config");
  if (j.contains("distill")) c.distill = j.at("distill").get<DistillConfig>();
  if (j.contains("data")) {
    const json& d = j.at("data");
    reject_unknown(d, {"generator", "seed", "split"}, "data");
    if (d.contains("generator")) c.data.generator = d.at("generator").get<GeneratorSpec>();
    if (d.contains("seed")) c.data.seed = d.at("seed").get<std::uint64_t>();
    if (d.contains("split")) c.data.split = d.at("split").get<std::vector<double>>();
  }
  if (j.contains("eval")) {
    const json& e = j.at("eval");
    reject_unknown(e, {"mode", "k", "cka_kernel", "cka_bandwidth_scale"}, "eval");
    if (e.contains("mode")) c.eval.mode = e.at("mode").get<std::string>();
    if (e.contains("k")) c.eval.k = e.at("k").get<std::size_t>();
    if (e.contains("cka_kernel")) c.eval.cka_kernel = e.at("cka_kernel").get<std::string>();
    if (e.contains("cka_bandwidth_scale")) c.eval.cka_bandwidth_scale = e.at("cka_bandwidth_scale").get<double>();
  }
  if (j.contains("probe")) c.probe = j.at("probe").get<ProbeConfig>();
  if (j.contains("quantify")) {
    const json& q = j.at("quantify");
    reject_unknown(q, {"count", "entropy"}, "quantify");
    if (q.contains("count")) c.quantify.count = q.at("count").get<std::size_t>();
    if (q.contains("entropy")) c.quantify.entropy = q.at("entropy").get<EntropyConfig>();
  }
  if (j.contains("sweep")) {
    const json& s = j.at("sweep");
    reject_unknown(s, {"fractions", "seeds"}, "sweep");
    if (s.contains("fractions")) c.sweep.fractions = s.at("fractions").get<std::vector<double>>();
    if (s.contains("seeds")) c.sweep.seeds = s.at("seeds").get<std::vector<std::uint64_t>>();
  }
  if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
}

ExperimentConfig load_experiment_config(const std::string& path) {
  const std::string text = detail::read_file(path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::config, "config " + path + " is not valid JSON: " + e.what());
  }
  return j.get<ExperimentConfig>();
}

// ---- Subcommands --------------------------------------------------------------

namespace {

struct Paths {
  std::string config;
  std::string out;
  std::string train;
  std::string test;
  std::string teacher;
  std::string checkpoint;
  std::string other;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::optional<std::string> mode;
  std::optional<std::size_t> k;
};

ExperimentConfig resolve_config(const Paths& p) {
  ExperimentConfig c = p.config.empty() ? ExperimentConfig{} : load_experiment_config(p.config);
  if (!p.out.empty()) c.output_dir = p.out;
  if (p.seed) c.distill.seed = *p.seed;
  if (p.epochs) c.distill.epochs = *p.epochs;
  if (p.mode) c.eval.mode = *p.mode;
  if (p.k) c.eval.k = *p.k;
  return c;
}

struct Splits {
  Dataset train;
  Dataset test;
  json source;
};

// Loads --train/--test, or generates them from the data section.
Splits load_splits(const Paths& p, const ExperimentConfig& c, bool need_test) {
  Splits s;
  if (!p.train.empty()) {
    s.train = load_dataset(p.train);
    s.source["train"] = p.train;
    if (!p.test.empty()) {
      s.test = load_dataset(p.test);
      s.source["test"] = p.test;
    } else if (need_test) {
      fail(ErrorKind::config, "--test is required together with --train");
    }
    return s;
  }
  Dataset all = generate_synthetic(c.data.generator, c.data.seed);
  auto parts = split(all, c.data.split, derive_seed(c.data.seed, "split"));
  if (parts.size() < 2 && need_test) fail(ErrorKind::config, "data.split needs a train and a test fraction");
  s.train = std::move(parts[0]);
  if (parts.size() > 1) s.test = std::move(parts[1]);
  s.source = {{"generated", c.data.generator}, {"seed", c.data.seed}, {"split", c.data.split}};
  return s;
}

void write_json(const std::filesystem::path& path, const json& j) { detail::write_file(path, j.dump(2) + "\n"); }

json seeds_of(const DistillConfig& d) {
  return {{"seed", d.seed},
          {"init", derive_seed(d.seed, "init")},
          {"align_head", derive_seed(d.seed, "align_head")},
          {"corr_head", derive_seed(d.seed, "corr_head")},
          {"sup_projection", derive_seed(d.seed, "sup_projection")},
          {"shuffle_rule", "derive_seed(seed + epoch, \"shuffle\")"},
          {"view_rule", "derive_seed(seed, \"view\", epoch * 1000003 + step)"}};
}

json final_record(const TrainLog& log) {
  const EpochRecord& r = log.epochs.back();
  json j{{"epoch", r.epoch}, {"lr", r.lr}, {"train_acc", r.train_acc}, {"losses", r.losses}};
  j["eval_acc"] = std::isnan(r.eval_acc) ? json(nullptr) : json(r.eval_acc);
  return j;
}

json base_report(const std::string& command, const ExperimentConfig& c) {
  return {{"command", command}, {"config", c}};
}

int cmd_gen_data(const Paths& p, std::ostream& out) {
  const ExperimentConfig c = resolve_config(p);
  const Dataset all = generate_synthetic(c.data.generator, c.data.seed);
  const std::filesystem::path dir = c.output_dir;
  const auto parts = split(all, c.data.split, derive_seed(c.data.seed, "split"));
  static const char* names[] = {"train", "test"};
  json report = base_report("gen-data", c);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const std::string name = i < 2 ? std::string(names[i]) : "part" + std::to_string(i);
    save_dataset(parts[i], dir / (name + ".ds"));
    report["files"][name] = {{"path", (dir / (name + ".ds")).string()}, {"samples", parts[i].size()}};
  }
  write_json(dir / "report.json", report);
  out << report.dump(2) << "\n";
  return kExitOk;
}

int cmd_pretrain(const Paths& p, std::ostream& out) {
  const ExperimentConfig c = resolve_config(p);
  const Splits s = load_splits(p, c, false);
  const TrainResult r = pretrain_teacher(c.distill, s.train, s.test.size() ? &s.test : nullptr);
  const std::filesystem::path dir = c.output_dir;
  save_checkpoint(r.checkpoint, dir / "teacher.ckpt");
  r.log.save_csv(dir / "train_log.csv");
  json report = base_report("pretrain", c);
  report["seeds"] = seeds_of(c.distill);
  report["data"] = s.source;
  report["final"] = final_record(r.log);
  write_json(dir / "report.json", report);
  out << report["final"].dump() << "\n";
  return kExitOk;
}

Checkpoint require_checkpoint(const std::string& path, const char* flag) {
  if (path.empty()) fail(ErrorKind::config, std::string(flag) + " is required");
  return load_checkpoint(path);
}

int cmd_distill(const Paths& p, std::ostream& out) {
  const ExperimentConfig c = resolve_config(p);
  const Checkpoint teacher = require_checkpoint(p.teacher, "--teacher");
  const Splits s = load_splits(p, c, false);
  const TrainResult r = distill(c.distill, teacher, s.train, s.test.size() ? &s.test : nullptr);
  const std::filesystem::path dir = c.output_dir;
  save_checkpoint(r.checkpoint, dir / "student.ckpt");
  r.log.save_csv(dir / "train_log.csv");
  json report = base_report("distill", c);
  report["seeds"] = seeds_of(c.distill);
  report["teacher"] = p.teacher;
  report["data"] = s.source;
  report["final"] = final_record(r.log);
  write_json(dir / "report.json", report);
  out << report["final"].dump() << "\n";
  return kExitOk;
}

int cmd_eval(const Paths& p, std::ostream& out) {
  const ExperimentConfig c = resolve_config(p);
  const Checkpoint ckpt = require_checkpoint(p.checkpoint, "--checkpoint");
  const Splits s = load_splits(p, c, true);
  const Network& net = ckpt.network;
  const std::string& mode = c.eval.mode;
  json result;
  if (mode == "top1") {
    if (!s.test.has_labels()) fail(ErrorKind::data, "eval: test set has no labels");
    const Tensor logits = forward_logits(net, forward_features(net, s.test.inputs));
    EvalReport r;
    r.mode = mode;
    r.top1 = top1_accuracy(logits, s.test.labels);
    if (logits.cols() >= 5) r.top5 = topk_accuracy(logits, s.test.labels, 5);
    r.n_test = s.test.size();
    r.seed = ckpt.seed;
    r.per_class = per_class_accuracy(argmax_rows(logits), s.test.labels, logits.cols());
    result = r;
  } else if (mode == "knn" || mode == "linear" || mode == "transfer") {
    if (!s.train.has_labels() || !s.test.has_labels()) fail(ErrorKind::data, "eval: datasets need labels");
    const Tensor ftr = forward_features(net, s.train.inputs);
    const Tensor fte = forward_features(net, s.test.inputs);
    EvalReport r;
    r.mode = mode;
    r.n_test = s.test.size();
    if (mode == "knn") {
      const auto pred = knn_classify(ftr, s.train.labels, fte, c.eval.k);
      std::size_t hits = 0;
      for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == s.test.labels[i] ? 1 : 0;
      r.top1 = static_cast<double>(hits) / static_cast<double>(pred.size());
      r.seed = ckpt.seed;
    } else {
      r.top1 = linear_probe(ftr, s.train.labels, fte, s.test.labels, c.probe);
      r.seed = c.probe.seed;
    }
    result = r;
    if (mode == "knn") result["k"] = c.eval.k;
  } else if (mode == "cka") {
    const Checkpoint other = require_checkpoint(p.other, "--other");
    const Tensor a = forward_features(net, s.test.inputs);
    const Tensor b = forward_features(other.network, s.test.inputs);
    result = {{"mode", mode},
              {"kernel", c.eval.cka_kernel},
              {"cka", cka_similarity(a, b, parse_cka_kernel(c.eval.cka_kernel), c.eval.cka_bandwidth_scale)},
              {"n_test", s.test.size()}};
  } else {
    fail(ErrorKind::config, "unknown eval mode '" + mode + "' (top1, knn, linear, transfer, cka)");
  }
  json report = base_report("eval", c);
  report["checkpoint"] = p.checkpoint;
  report["data"] = s.source;
  report["result"] = result;
  write_json(std::filesystem::path(c.output_dir) / "report.json", report);
  out << result.dump() << "\n";
  return kExitOk;
}

int cmd_quantify(const Paths& p, std::ostream& out) {
  const ExperimentConfig c = resolve_config(p);
  const Checkpoint ckpt = require_checkpoint(p.checkpoint, "--checkpoint");
  Dataset images;
  json source;
  if (!p.test.empty()) {
    images = load_dataset(p.test);
    source = {{"test", p.test}};
  } else {
    Splits s = load_splits(p, c, true);
    images = std::move(s.test);
    source = s.source;
  }
  const QuantifyReport q = quantify_dataset(ckpt.network, images, c.quantify.count, c.quantify.entropy);
  const std::filesystem::path dir = c.output_dir;
  // One map per selected image, in the original frame of the first view.
  for (const auto& im : q.images) {
    Tensor image(images.sample_shape());
    const auto row = images.inputs.row(im.index);
    std::copy(row.begin(), row.end(), image.values().begin());
    EntropyConfig cfg = c.quantify.entropy;
    cfg.seed = derive_seed(c.quantify.entropy.seed, "entropy", im.index * 4 + static_cast<std::size_t>(im.turns_a));
    const EntropyMap m =
        rotate_map(estimate_pixel_entropy(ckpt.network, rotate_quarter_turns(image, im.turns_a), cfg), (4 - im.turns_a) % 4);
    save_entropy_map_csv(m, dir / "maps" / ("image_" + std::to_string(im.index) + ".csv"));
  }
  json report = base_report("quantify", c);
  report["checkpoint"] = p.checkpoint;
  report["data"] = source;
  report["result"] = q;
  write_json(dir / "report.json", report);
  out << json{{"mean_entropy", q.mean_entropy}, {"mean_iou", q.mean_iou}}.dump() << "\n";
  return kExitOk;
}

json sweep_json(const SweepResult& r) {
  json means = json::object();
  for (const auto& [label, m] : r.means()) means[label] = m;
  json runs = json::array();
  for (const auto& run : r.runs) {
    runs.push_back({{"label", run.label},
                    {"fraction", run.fraction},
                    {"seed", run.seed},
                    {"train_acc", run.final_train_acc},
                    {"eval_acc", run.final_eval_acc}});
  }
  return {{"means", means}, {"runs", runs}};
}

int cmd_sweep(const Paths& p, std::ostream& out, bool fewshot) {
  const ExperimentConfig c = resolve_config(p);
  const Checkpoint teacher = require_checkpoint(p.teacher, "--teacher");
  const Splits s = load_splits(p, c, true);
  const SweepResult r = fewshot ? run_fewshot(c.distill, teacher, s.train, s.test, c.sweep.fractions, c.sweep.seeds)
                                : run_ablation(c.distill, teacher, s.train, s.test, c.sweep.seeds);
  const std::filesystem::path dir = c.output_dir;
  const std::string name = fewshot ? "fewshot" : "ablation";
  detail::write_file(dir / (name + ".csv"), r.to_csv());
  json report = base_report(fewshot ? "fewshot" : "ablate", c);
  report["teacher"] = p.teacher;
  report["data"] = s.source;
  report["result"] = sweep_json(r);
  write_json(dir / "report.json", report);
  out << report["result"]["means"].dump() << "\n";
  return kExitOk;
}

int cmd_boundcheck(const Paths& p, std::size_t samples, std::ostream& out) {
  const ExperimentConfig c = resolve_config(p);
  json rows = json::array();
  bool ok = true;
  for (double rho : {0.0, 0.5, 0.9}) {
    const auto pairs = gaussian_pairs(rho, samples, samples, derive_seed(c.distill.seed, "boundcheck"));
    const MiBound b = mi_lower_bound(pairs, gaussian_density_ratio(rho));
    const double mi = gaussian_mutual_information(rho);
    const bool pass = b.bound <= mi + 0.05;
    ok = ok && pass;
    rows.push_back({{"rho", rho},
                    {"analytic_mi", mi},
                    {"bound", b.bound},
                    {"constant_term", b.constant_term},
                    {"expectation_term", b.expectation_term},
                    {"within_tolerance", pass}});
  }
  json report = base_report("boundcheck", c);
  report["samples_per_class"] = samples;
  report["result"] = {{"rows", rows}, {"all_within_tolerance", ok}};
  write_json(std::filesystem::path(c.output_dir) / "report.json", report);
  out << report["result"].dump() << "\n";
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"mlkd: multi-level knowledge distillation toolkit", "mlkd"};
  app.require_subcommand(1);
  Paths p;
  std::size_t samples = 10000;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", p.config, "experiment JSON")->check(CLI::ExistingFile);
    sub->add_option("--out", p.out, "output directory (overrides output_dir)");
    sub->add_option("--seed", p.seed, "override distill.seed");
  };
  auto data = [&](CLI::App* sub) {
    sub->add_option("--train", p.train, "training dataset file")->check(CLI::ExistingFile);
    sub->add_option("--test", p.test, "evaluation dataset file")->check(CLI::ExistingFile);
  };

  auto* gen = app.add_subcommand("gen-data", "generate and split a synthetic dataset");
  common(gen);
  auto* pre = app.add_subcommand("pretrain", "train a teacher with cross-entropy");
  common(pre);
  data(pre);
  pre->add_option("--epochs", p.epochs, "override distill.epochs");
  auto* dis = app.add_subcommand("distill", "distill a student from a teacher checkpoint");
  common(dis);
  data(dis);
  dis->add_option("--teacher", p.teacher, "teacher checkpoint")->check(CLI::ExistingFile);
  dis->add_option("--epochs", p.epochs, "override distill.epochs");
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  common(ev);
  data(ev);
  ev->add_option("--checkpoint", p.checkpoint, "checkpoint to evaluate")->check(CLI::ExistingFile);
  ev->add_option("--other", p.other, "second checkpoint for cka")->check(CLI::ExistingFile);
  ev->add_option("--mode", p.mode, "top1|knn|linear|transfer|cka");
  ev->add_option("--k", p.k, "neighbours for knn");
  auto* qu = app.add_subcommand("quantify", "pixel entropy maps, average entropy and IoU");
  common(qu);
  data(qu);
  qu->add_option("--checkpoint", p.checkpoint, "checkpoint to quantify")->check(CLI::ExistingFile);
  auto* fs = app.add_subcommand("fewshot", "distill on 25/50/75/100% of the training set");
  common(fs);
  data(fs);
  fs->add_option("--teacher", p.teacher, "teacher checkpoint")->check(CLI::ExistingFile);
  fs->add_option("--epochs", p.epochs, "override distill.epochs");
  auto* ab = app.add_subcommand("ablate", "the seven loss-combination rows");
  common(ab);
  data(ab);
  ab->add_option("--teacher", p.teacher, "teacher checkpoint")->check(CLI::ExistingFile);
  ab->add_option("--epochs", p.epochs, "override distill.epochs");
  auto* bc = app.add_subcommand("boundcheck", "mutual-information bound on Gaussian pairs");
  common(bc);
  bc->add_option("--samples", samples, "positive and negative pairs per correlation");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error[config]: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(p, out);
    if (pre->parsed()) return cmd_pretrain(p, out);
    if (dis->parsed()) return cmd_distill(p, out);
    if (ev->parsed()) return cmd_eval(p, out);
    if (qu->parsed()) return cmd_quantify(p, out);
    if (fs->parsed()) return cmd_sweep(p, out, true);
    if (ab->parsed()) return cmd_sweep(p, out, false);
    if (bc->parsed()) return cmd_boundcheck(p, samples, out);
  } catch (const Error& e) {
    err << "error[" << to_string(e.kind()) << "]: " << e.what() << "\n";
    return e.kind() == ErrorKind::config ? kExitConfig : kExitRuntime;
  } catch (const json::exception& e) {
    err << "error[config]: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error[runtime]: " << e.what() << "\n";
    return kExitRuntime;
  }
  err << "error[config]: no subcommand\n";
  return kExitConfig;
}

}  // namespace mlkd
