#pragma once

#include <functional>

#include "flowreg/tensor.hpp"

namespace flowreg {

// Max over components of |g_ad - g_fd| / max(|g_ad|, |g_fd|, floor), with g_fd
// from the fourth-order five-point central difference of step eps and
// floor = 1e-10 max(1, |f|) / eps. `f` must return a scalar.
double grad_check(const std::function<TensorD(const TensorD&)>& f, const TensorD& x,
                  double eps = 1e-5);

// Same check against a leaf that `f` already closes over (e.g. a network
// parameter). The leaf is perturbed in place and restored afterwards.
double grad_check_leaf(const std::function<TensorD()>& f, TensorD leaf, double eps = 1e-5);

}  // namespace flowreg
