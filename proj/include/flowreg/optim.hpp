#pragma once

// Adam with bias correction and the step learning-rate schedule.

#include <cstdint>
#include <string>
#include <vector>

#include "flowreg/checkpoint.hpp"
#include "flowreg/nn.hpp"

namespace flowreg {

struct AdamOptions {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
class Adam {
 public:
  Adam(std::string name, ParameterRegistry<T> params, const AdamOptions& options = {});

  // One update from the gradients currently stored on the parameters.
  void step();
  void zero_grad() const { params_.zero_grad(); }

  void set_lr(double lr) { options_.lr = lr; }
  double lr() const { return options_.lr; }
  std::int64_t step_count() const { return step_; }
  const ParameterRegistry<T>& parameters() const { return params_; }

  // Moment buffers and step counter as "<name>.<param>.m", ".v", "<name>.step".
  void save_state(Checkpoint& ck) const;
  void load_state(const Checkpoint& ck);

 private:
  std::string name_;
  ParameterRegistry<T> params_;
  AdamOptions options_;
  std::vector<std::vector<T>> m_, v_;
  std::int64_t step_ = 0;
};

// Stateless form: updates `param` in place from `grad`, advancing `m`, `v`.
// `step` is the 1-based index of this update.
template <typename T>
void adam_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v,
                 std::int64_t step, const AdamOptions& options);

// base * 10^-floor(epoch / every).
double lr_at(int epoch, double base, int every = 20, double factor = 10.0);

}  // namespace flowreg
