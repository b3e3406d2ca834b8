// SPDX-License-Identifier: Apache-2.0
#include "mlkd/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mlkd/error.hpp"

namespace mlkd {
namespace {

constexpr std::size_t kMaxCheckedElements = 100000;

double checked_scalar(Var out) {
  if (out.value().size() != 1) {
    fail(ErrorKind::contract, "scalar function returned shape " + shape_string(out.shape()));
  }
  const double v = out.value()[0];
  if (!std::isfinite(v)) fail(ErrorKind::numeric, "scalar function evaluated to a non-finite value");
  return v;
}

}  // namespace

double evaluate(const ScalarFn& fn, std::span<const Tensor> params) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const auto& p : params) vars.push_back(tape.constant(p));
  return checked_scalar(fn(tape, vars));
}

std::vector<Tensor> grad(const ScalarFn& fn, std::span<const Tensor> params) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const auto& p : params) vars.push_back(tape.leaf(p));
  Var out = fn(tape, vars);
  checked_scalar(out);
  tape.backward(out);
  std::vector<Tensor> grads;
  grads.reserve(vars.size());
  for (const auto& v : vars) grads.push_back(tape.grad(v));
  return grads;
}

double finite_diff_check(const ScalarFn& fn, std::span<const Tensor> params, double step) {
  if (!(step > 0.0 && step <= 1e-2)) {
    fail(ErrorKind::parameter, "finite_diff_check: step must lie in (0, 1e-2], got " + std::to_string(step));
  }
  std::size_t total = 0;
  for (const auto& p : params) total += p.size();
  if (total >= kMaxCheckedElements) {
    fail(ErrorKind::parameter, "finite_diff_check: " + std::to_string(total) + " elements exceeds the oracle budget");
  }

  const auto analytic = grad(fn, params);
  std::vector<Tensor> probe(params.begin(), params.end());
  double worst = 0.0;
  for (std::size_t p = 0; p < probe.size(); ++p) {
    for (std::size_t i = 0; i < probe[p].size(); ++i) {
      const double saved = probe[p][i];
      probe[p][i] = saved + step;
      const double up = evaluate(fn, probe);
      probe[p][i] = saved - step;
      const double down = evaluate(fn, probe);
      probe[p][i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      worst = std::max(worst, std::abs(analytic[p][i] - numeric) / (std::abs(numeric) + 1e-8));
    }
  }
  return worst;
}

}  // namespace mlkd
