#include "flowreg/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace flowreg {

template <typename T>
void adam_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v,
                 std::int64_t step, const AdamOptions& o) {
  if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size()) {
    throw ShapeError("adam_update: parameter, gradient and moment sizes differ");
  }
  if (step < 1) throw std::invalid_argument("adam_update: step must be >= 1");
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    const double mi = o.beta1 * m[i] + (1.0 - o.beta1) * g;
    const double vi = o.beta2 * v[i] + (1.0 - o.beta2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    const double update = o.lr * (mi / c1) / (std::sqrt(vi / c2) + o.eps);
    param[i] = static_cast<T>(param[i] - update);
  }
}

template <typename T>
Adam<T>::Adam(std::string name, ParameterRegistry<T> params, const AdamOptions& options)
    : name_(std::move(name)), params_(std::move(params)), options_(options) {
  for (const auto& p : params_.entries()) {
    m_.emplace_back(static_cast<std::size_t>(p.tensor.numel()), T(0));
    v_.emplace_back(static_cast<std::size_t>(p.tensor.numel()), T(0));
  }
}

template <typename T>
void Adam<T>::step() {
  ++step_;
  const auto& entries = params_.entries();
  for (std::size_t k = 0; k < entries.size(); ++k) {
    auto t = entries[k].tensor;
    const auto grad = t.grad();
    if (grad.empty()) continue;
    adam_update<T>(t.data_mut(), grad, m_[k], v_[k], step_, options_);
  }
}

template <typename T>
void Adam<T>::save_state(Checkpoint& ck) const {
  const auto& entries = params_.entries();
  for (std::size_t k = 0; k < entries.size(); ++k) {
    const auto& shape = entries[k].tensor.shape();
    ck.add(name_ + "." + entries[k].name + ".m", dtype_of<T>(), shape,
           std::vector<double>(m_[k].begin(), m_[k].end()));
    ck.add(name_ + "." + entries[k].name + ".v", dtype_of<T>(), shape,
           std::vector<double>(v_[k].begin(), v_[k].end()));
  }
  ck.add_scalar(name_ + ".step", static_cast<double>(step_));
}

template <typename T>
void Adam<T>::load_state(const Checkpoint& ck) {
  const auto& entries = params_.entries();
  for (std::size_t k = 0; k < entries.size(); ++k) {
    for (auto [suffix, buffer] : {std::pair{".m", &m_[k]}, std::pair{".v", &v_[k]}}) {
      const auto& e = ck.at(name_ + "." + entries[k].name + suffix);
      if (e.values.size() != buffer->size()) {
        throw CheckpointError(CheckpointErrorKind::format,
                              "optimizer state " + e.name + " has the wrong size");
      }
      for (std::size_t i = 0; i < e.values.size(); ++i) (*buffer)[i] = static_cast<T>(e.values[i]);
    }
  }
  step_ = static_cast<std::int64_t>(ck.scalar(name_ + ".step"));
}

double lr_at(int epoch, double base, int every, double factor) {
  if (epoch < 0) throw std::invalid_argument("lr_at: epoch must be >= 0");
  if (every < 1) throw std::invalid_argument("lr_at: decay interval must be >= 1");
  return base * std::pow(factor, -static_cast<double>(epoch / every));
}

template class Adam<float>;
template class Adam<double>;
template void adam_update(std::span<float>, std::span<const float>, std::span<float>,
                          std::span<float>, std::int64_t, const AdamOptions&);
template void adam_update(std::span<double>, std::span<const double>, std::span<double>,
                          std::span<double>, std::int64_t, const AdamOptions&);

}  // namespace flowreg
