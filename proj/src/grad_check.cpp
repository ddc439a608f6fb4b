#include "flowreg/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace flowreg {

double grad_check_leaf(const std::function<TensorD()>& f, TensorD leaf, double eps) {
  const bool had_grad = leaf.requires_grad();
  if (!had_grad) leaf.set_requires_grad(true);
  leaf.zero_grad();
  const auto value = f();
  // Round-off of the difference quotient grows like |f| / eps; components
  // below this level are compared in absolute terms.
  const double floor = 1e-10 * std::max(1.0, std::abs(value.item())) / eps;
  value.backward();
  const auto g = leaf.grad();
  std::vector<double> analytic(g.begin(), g.end());
  leaf.zero_grad();

  std::vector<double> numeric(analytic.size());
  auto values = leaf.data_mut();
  {
    NoGradGuard no_grad;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      const auto at = [&](double offset) {
        values[i] = original + offset;
        return static_cast<double>(f().item());
      };
      numeric[i] = (8.0 * (at(eps) - at(-eps)) - (at(2.0 * eps) - at(-2.0 * eps))) / (12.0 * eps);
      values[i] = original;
    }
  }
  if (!had_grad) leaf.set_requires_grad(false);

  double worst = 0.0;
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

double grad_check(const std::function<TensorD(const TensorD&)>& f, const TensorD& x,
                  double eps) {
  TensorD leaf(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), true);
  return grad_check_leaf([&] { return f(leaf); }, leaf, eps);
}

}  // namespace flowreg
