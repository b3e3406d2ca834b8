// SPDX-License-Identifier: Apache-2.0
#include "mlkd/experiments.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>

#include "mlkd/error.hpp"

namespace mlkd {

const std::vector<AblationRow>& ablation_rows() {
  static const std::vector<AblationRow> rows{
      {"align", true, false, false},     {"corr", false, true, false},     {"sup", false, false, true},
      {"align+sup", true, false, true},  {"corr+sup", false, true, true},  {"align+corr", true, true, false},
      {"all", true, true, true},
  };
  return rows;
}

LossWeights ablation_weights(const AblationRow& row, const LossWeights& base) {
  LossWeights w = base;
  if (!row.align) w.lambda_align = 0.0;
  if (!row.corr) w.lambda_corr = 0.0;
  if (!row.sup) w.w_sup = 0.0;
  w.w_kd = 0.0;
  return w;
}

LossWeights scratch_weights(const LossWeights& base) {
  LossWeights w = base;
  w.lambda_align = w.lambda_corr = w.w_sup = w.w_kd = 0.0;
  return w;
}

LossWeights kd_only_weights(const LossWeights& base) {
  LossWeights w = scratch_weights(base);
  w.w_kd = 1.0;
  return w;
}

std::size_t run_parallelism() {
  const char* env = std::getenv("MLKD_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1) fail(ErrorKind::config, std::string("MLKD_THREADS must be a positive integer, got '") + env + "'");
  return static_cast<std::size_t>(v);
}

void parallel_for(std::size_t count, std::size_t workers, const std::function<void(std::size_t)>& job) {
  workers = std::max<std::size_t>(1, std::min(workers, count));
  if (workers == 1) {
    for (std::size_t i = 0; i < count; ++i) job(i);
    return;
  }
  std::mutex mu;
  std::size_t next = 0;
  std::exception_ptr error;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        std::size_t i;
        {
          std::lock_guard lock(mu);
          if (next >= count || error) return;
          i = next++;
        }
        try {
          job(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

std::vector<std::pair<std::string, double>> SweepResult::means() const {
  std::vector<std::pair<std::string, double>> out;
  std::vector<std::size_t> counts;
  for (const auto& r : runs) {
    auto it = std::find_if(out.begin(), out.end(), [&](const auto& p) { return p.first == r.label; });
    if (it == out.end()) {
      out.emplace_back(r.label, 0.0);
      counts.push_back(0);
      it = out.end() - 1;
    }
    it->second += r.final_eval_acc;
    ++counts[static_cast<std::size_t>(it - out.begin())];
  }
  for (std::size_t i = 0; i < out.size(); ++i) out[i].second /= static_cast<double>(counts[i]);
  return out;
}

std::string SweepResult::to_csv() const {
  std::string out = "label,fraction,seed,train_acc,eval_acc\n";
  char line[256];
  for (const auto& r : runs) {
    std::snprintf(line, sizeof line, "%s,%.17g,%llu,%.17g,%.17g\n", r.label.c_str(), r.fraction,
                  static_cast<unsigned long long>(r.seed), r.final_train_acc, r.final_eval_acc);
    out += line;
  }
  return out;
}

namespace {

struct Job {
  std::string label;
  DistillConfig config;
};

SweepResult run_jobs(const std::vector<Job>& jobs, const Checkpoint& teacher, const Dataset& train,
                     const Dataset& eval) {
  SweepResult result;
  result.runs.resize(jobs.size());
  parallel_for(jobs.size(), run_parallelism(), [&](std::size_t i) {
    const TrainResult r = distill(jobs[i].config, teacher, train, &eval);
    const EpochRecord& last = r.log.epochs.back();
    result.runs[i] = {jobs[i].label, jobs[i].config.few_shot_fraction, jobs[i].config.seed, last.train_acc,
                      last.eval_acc};
  });
  return result;
}

}  // namespace

SweepResult run_ablation(const DistillConfig& base, const Checkpoint& teacher, const Dataset& train,
                         const Dataset& eval, const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) fail(ErrorKind::config, "ablation needs at least one seed");
  std::vector<Job> jobs;
  for (const auto& row : ablation_rows()) {
    for (auto seed : seeds) {
      DistillConfig c = base;
      c.seed = seed;
      c.weights = ablation_weights(row, base.weights);
      jobs.push_back({row.name, c});
    }
  }
  return run_jobs(jobs, teacher, train, eval);
}

SweepResult run_fewshot(const DistillConfig& base, const Checkpoint& teacher, const Dataset& train,
                        const Dataset& eval, const std::vector<double>& fractions,
                        const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty() || fractions.empty()) fail(ErrorKind::config, "few-shot sweep needs fractions and seeds");
  std::vector<Job> jobs;
  for (double f : fractions) {
    for (auto seed : seeds) {
      DistillConfig c = base;
      c.seed = seed;
      c.few_shot_fraction = f;
      char label[32];
      std::snprintf(label, sizeof label, "%g", f);
      jobs.push_back({label, c});
    }
  }
  return run_jobs(jobs, teacher, train, eval);
}

}  // namespace mlkd
