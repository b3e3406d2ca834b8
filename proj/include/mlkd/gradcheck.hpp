// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <span>
#include <vector>

#include "mlkd/autograd.hpp"

namespace mlkd {

/// A scalar function of parameter tensors, expressed on a tape so it can be
/// both evaluated and differentiated.
using ScalarFn = std::function<Var(Tape&, std::span<const Var>)>;

double evaluate(const ScalarFn& fn, std::span<const Tensor> params);

/// Reverse-mode gradient of fn at params, one tensor per parameter.
std::vector<Tensor> grad(const ScalarFn& fn, std::span<const Tensor> params);

/// Central-difference check of grad(). Returns the maximum over elements of
/// |analytic - numeric| / (|numeric| + 1e-8).
///
/// Points where fn is not differentiable (ReLU at exactly zero, ties inside a
/// hard max) are outside the contract; callers pick configurations away from
/// them.
double finite_diff_check(const ScalarFn& fn, std::span<const Tensor> params, double step = 1e-5);

}  // namespace mlkd
