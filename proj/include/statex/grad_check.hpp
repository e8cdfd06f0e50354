#pragma once

#include <functional>

#include "statex/tensor.hpp"

namespace statex {

// Scalar objective that also writes its analytic gradient when `grad` is non-null.
using Objective = std::function<double(const Tensor & x, Tensor * grad)>;

// Max over coordinates of |analytic - central| / max(|analytic|, |central|, 1e-8).
double grad_check(const Objective & f, const Tensor & x, double eps);

} // namespace statex
