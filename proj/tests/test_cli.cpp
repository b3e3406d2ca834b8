// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "mlkd/cli.hpp"
#include "mlkd/experiments.hpp"

using namespace mlkd;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

nlohmann::json small_config() {
  return {{"distill",
           {{"epochs", 2},
            {"batch_size", 16},
            {"lr_decay_epochs", {1}},
            {"transform_multiplier", 2.0},
            {"loss_weights", {{"lambda_align", 0.05}}},
            {"teacher_arch", {{"input_shape", {6}}, {"widths", {16, 12}}, {"num_classes", 4}}},
            {"student_arch", {{"input_shape", {6}}, {"widths", {10, 8}}, {"num_classes", 4}}}}},
          {"data", {{"generator", {{"num_classes", 4}, {"samples_per_class", 15}, {"input_dim", 6}}}, {"seed", 2}}},
          {"sweep", {{"seeds", {0}}}}};
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("mlkd_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

fs::path write_config(const fs::path& dir, const nlohmann::json& j) {
  const fs::path p = dir / "config.json";
  std::ofstream(p) << j.dump(2);
  return p;
}

}  // namespace

TEST_CASE("end to end pipeline") {
  const fs::path dir = fresh_dir("pipeline");
  const std::string cfg = write_config(dir, small_config()).string();

  Run r = cli({"gen-data", "--config", cfg, "--out", (dir / "data").string()});
  REQUIRE(r.code == 0);
  CHECK(fs::exists(dir / "data" / "train.ds"));
  CHECK(fs::exists(dir / "data" / "test.ds"));
  const std::string train = (dir / "data" / "train.ds").string(), test = (dir / "data" / "test.ds").string();

  r = cli({"pretrain", "--config", cfg, "--train", train, "--test", test, "--out", (dir / "teacher").string()});
  REQUIRE(r.code == 0);
  CHECK(fs::exists(dir / "teacher" / "teacher.ckpt"));
  const std::string teacher = (dir / "teacher" / "teacher.ckpt").string();

  r = cli({"distill", "--config", cfg, "--teacher", teacher, "--train", train, "--test", test, "--out",
           (dir / "run").string()});
  REQUIRE(r.code == 0);
  for (const char* f : {"student.ckpt", "train_log.csv", "report.json"}) CHECK(fs::exists(dir / "run" / f));
  const auto report = nlohmann::json::parse(slurp(dir / "run" / "report.json"));
  CHECK(report.contains("config"));
  CHECK(report.contains("seeds"));
  CHECK(slurp(dir / "run" / "train_log.csv").rfind("epoch,lr,align,corr,sup,ce,kd,total,train_acc,eval_acc,seconds\n", 0) ==
        0);

  const std::string student = (dir / "run" / "student.ckpt").string();
  r = cli({"eval", "--config", cfg, "--checkpoint", student, "--train", train, "--test", test, "--mode", "knn", "--k",
           "10", "--out", (dir / "eval").string()});
  REQUIRE(r.code == 0);
  const auto knn = nlohmann::json::parse(r.out);
  CHECK(knn.at("mode") == "knn");
  CHECK(knn.at("k") == 10);
  CHECK(knn.at("top1").get<double>() >= 0.0);

  for (const char* mode : {"top1", "linear"}) {
    r = cli({"eval", "--config", cfg, "--checkpoint", student, "--train", train, "--test", test, "--mode", mode,
             "--out", (dir / "eval").string()});
    CHECK(r.code == 0);
    CHECK(nlohmann::json::parse(r.out).contains("top1"));
  }
  r = cli({"eval", "--config", cfg, "--checkpoint", student, "--other", teacher, "--test", test, "--train", train,
           "--mode", "cka", "--out", (dir / "eval").string()});
  CHECK(r.code == 0);
  const double cka = nlohmann::json::parse(r.out).at("cka");
  CHECK(cka >= 0.0);
  CHECK(cka <= 1.0);

  r = cli({"ablate", "--config", cfg, "--teacher", teacher, "--train", train, "--test", test, "--epochs", "1", "--out",
           (dir / "ablate").string()});
  REQUIRE(r.code == 0);
  std::istringstream rows(slurp(dir / "ablate" / "ablation.csv"));
  std::string line;
  std::vector<std::string> labels;
  std::getline(rows, line);
  CHECK(line == "label,fraction,seed,train_acc,eval_acc");
  while (std::getline(rows, line)) labels.push_back(line.substr(0, line.find(',')));
  REQUIRE(labels.size() == 7);
  for (std::size_t i = 0; i < 7; ++i) CHECK(labels[i] == ablation_rows()[i].name);

  r = cli({"boundcheck", "--config", cfg, "--samples", "2000", "--out", (dir / "bound").string()});
  CHECK(r.code == 0);
  CHECK(nlohmann::json::parse(r.out).at("all_within_tolerance") == true);
  fs::remove_all(dir);
}

TEST_CASE("quantify on image data") {
  const fs::path dir = fresh_dir("quantify");
  nlohmann::json c = small_config();
  c["data"]["generator"] = {{"family", "bars"}, {"num_classes", 4}, {"samples_per_class", 10}, {"image_size", 6}};
  c["distill"]["teacher_arch"]["input_shape"] = {1, 6, 6};
  c["distill"]["student_arch"]["input_shape"] = {1, 6, 6};
  c["quantify"] = {{"count", 2}, {"entropy", {{"steps", 20}}}};
  const std::string cfg = write_config(dir, c).string();
  REQUIRE(cli({"pretrain", "--config", cfg, "--out", (dir / "t").string()}).code == 0);
  const Run r = cli({"quantify", "--config", cfg, "--checkpoint", (dir / "t" / "teacher.ckpt").string(), "--out",
                     (dir / "q").string()});
  REQUIRE(r.code == 0);
  const auto j = nlohmann::json::parse(r.out);
  CHECK(j.contains("mean_entropy"));
  CHECK(j.at("mean_iou").get<double>() >= 0.0);
  CHECK(fs::exists(dir / "q" / "report.json"));
  std::size_t maps = 0;
  for (const auto& e : fs::directory_iterator(dir / "q" / "maps")) maps += e.path().extension() == ".csv";
  CHECK(maps == 2);
  fs::remove_all(dir);
}

TEST_CASE("error exit codes") {
  const fs::path dir = fresh_dir("errors");
  nlohmann::json c = small_config();
  c["distill"]["learning_rate"] = 0.1;
  const std::string bad = write_config(dir, c).string();
  Run r = cli({"pretrain", "--config", bad, "--out", (dir / "x").string()});
  CHECK(r.code == kExitConfig);
  CHECK(r.err.rfind("error[config]", 0) == 0);
  CHECK(r.err.find("learning_rate") != std::string::npos);

  CHECK(cli({}).code == kExitConfig);
  CHECK(cli({"frobnicate"}).code == kExitConfig);
  CHECK(cli({"pretrain", "--config", (dir / "missing.json").string()}).code == kExitConfig);

  std::ofstream(dir / "junk.ckpt") << "not a checkpoint";
  const std::string good = write_config(dir, small_config()).string();
  r = cli({"eval", "--config", good, "--checkpoint", (dir / "junk.ckpt").string(), "--out", (dir / "x").string()});
  CHECK(r.code == kExitRuntime);
  CHECK(r.err.rfind("error[format]", 0) == 0);
  fs::remove_all(dir);
}
