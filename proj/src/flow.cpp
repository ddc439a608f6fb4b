#include "flowreg/flow.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include "flowreg/ops.hpp"

namespace flowreg {

// ---------------------------------------------------------------------------
// ActNorm

template <typename T>
ActNorm<T>::ActNorm(int channels)
    : scale_(Tensor<T>::ones({channels}, true)),
      bias_(Tensor<T>::zeros({channels}, true)),
      initialized_(Tensor<T>::zeros({1})) {}

template <typename T>
Tensor<T> ActNorm<T>::logdet(const Tensor<T>& x) const {
  const T hw = static_cast<T>(x.dim(2) * x.dim(3));
  return mul_scalar(sum(log(abs(scale_))), hw);
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> ActNorm<T>::forward(const Tensor<T>& x) const {
  return {channel_affine(x, scale_, bias_), logdet(x)};
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> ActNorm<T>::inverse(const Tensor<T>& y) const {
  auto inv_scale = div(Tensor<T>::scalar(T(1)), scale_);
  auto inv_shift = neg(mul(bias_, inv_scale));
  return {channel_affine(y, inv_scale, inv_shift), neg(logdet(y))};
}

template <typename T>
void ActNorm<T>::data_init(const Tensor<T>& x) {
  const auto B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const auto v = x.data();
  auto s = scale_.data_mut();
  auto b = bias_.data_mut();
  const double n = static_cast<double>(B * HW);
  for (std::int64_t c = 0; c < C; ++c) {
    double mean = 0.0;
    for (std::int64_t i = 0; i < B; ++i)
      for (std::int64_t p = 0; p < HW; ++p) mean += v[static_cast<std::size_t>((i * C + c) * HW + p)];
    mean /= n;
    double var = 0.0;
    for (std::int64_t i = 0; i < B; ++i)
      for (std::int64_t p = 0; p < HW; ++p) {
        const double d = v[static_cast<std::size_t>((i * C + c) * HW + p)] - mean;
        var += d * d;
      }
    var /= n;
    const double scale = 1.0 / (std::sqrt(var) + 1e-6);
    s[static_cast<std::size_t>(c)] = static_cast<T>(scale);
    b[static_cast<std::size_t>(c)] = static_cast<T>(-mean * scale);
  }
  initialized_.data_mut()[0] = T(1);
}

template <typename T>
void ActNorm<T>::collect(const std::string& prefix, ParameterRegistry<T>& params,
                         ParameterRegistry<T>& buffers) const {
  params.add(prefix + ".scale", scale_);
  params.add(prefix + ".bias", bias_);
  buffers.add(prefix + ".initialized", initialized_);
}

// ---------------------------------------------------------------------------
// Affine coupling

template <typename T>
AffineCoupling<T>::AffineCoupling(int channels, int hidden, double s_max, std::mt19937_64& rng)
    : channels_(channels), s_max_(s_max) {
  if (channels < 2 || channels % 2 != 0) {
    throw std::invalid_argument("affine coupling needs an even channel count >= 2, got " +
                                std::to_string(channels));
  }
  const int half = channels / 2;
  net_.template emplace<Conv2dLayer<T>>(half, hidden, 3, 1, 1, Init::he(), rng);
  net_.template emplace<ActivationLayer<T>>(UnaryOp::relu);
  net_.template emplace<Conv2dLayer<T>>(hidden, hidden, 1, 1, 0, Init::he(), rng);
  net_.template emplace<ActivationLayer<T>>(UnaryOp::relu);
  net_.template emplace<Conv2dLayer<T>>(hidden, 2 * half, 3, 1, 1, Init::zeros(), rng);
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> AffineCoupling<T>::scale_shift(const Tensor<T>& x1) const {
  const int half = channels_ / 2;
  auto h = net_.forward(x1);
  const T s_max = static_cast<T>(s_max_);
  auto raw = slice_channels(h, 0, half);
  auto s = mul_scalar(tanh(mul_scalar(raw, T(1) / s_max)), s_max);
  auto t = slice_channels(h, half, 2 * half);
  return {s, t};
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> AffineCoupling<T>::forward(const Tensor<T>& x) const {
  const int half = channels_ / 2;
  auto x1 = slice_channels(x, 0, half);
  auto x2 = slice_channels(x, half, channels_);
  auto [s, t] = scale_shift(x1);
  auto y2 = x2 * exp(s) + t;
  return {concat_channels<T>({x1, y2}), sum(s, {1, 2, 3})};
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> AffineCoupling<T>::inverse(const Tensor<T>& y) const {
  const int half = channels_ / 2;
  auto y1 = slice_channels(y, 0, half);
  auto y2 = slice_channels(y, half, channels_);
  auto [s, t] = scale_shift(y1);
  auto x2 = (y2 - t) * exp(inverse_fault_ ? s : neg(s));
  return {concat_channels<T>({y1, x2}), neg(sum(s, {1, 2, 3}))};
}

template <typename T>
void AffineCoupling<T>::collect(const std::string& prefix, ParameterRegistry<T>& params) const {
  net_.collect_parameters(prefix, params);
}

// ---------------------------------------------------------------------------
// Flow model

template <typename T>
FlowModel<T>::FlowModel(int in_channels, const FlowOptions& options)
    : options_(options),
      in_channels_(in_channels),
      latent_channels_(in_channels * options.squeeze_factor * options.squeeze_factor) {
  if (in_channels < 1) throw std::invalid_argument("flow model needs in_channels >= 1");
  if (options.blocks < 1) throw std::invalid_argument("flow model needs at least one block");
  if (options.squeeze_factor < 1) throw std::invalid_argument("squeeze factor must be >= 1");
  std::mt19937_64 rng(derive_seed(options.seed, options.name));
  for (int b = 0; b < options.blocks; ++b) {
    actnorms_.emplace_back(latent_channels_);
    couplings_.emplace_back(latent_channels_, options.hidden_channels, options.s_max, rng);
  }
}

template <typename T>
void FlowModel<T>::check_input(const Tensor<T>& x) const {
  const int f = options_.squeeze_factor;
  if (x.rank() != 4 || x.dim(1) != in_channels_ || x.dim(2) % f != 0 || x.dim(3) % f != 0) {
    throw ShapeError("flow input " + shape_str(x.shape()) + " must be B x " +
                     std::to_string(in_channels_) + " x H x W with H, W divisible by " +
                     std::to_string(f));
  }
}

template <typename T>
LatentCode<T> FlowModel<T>::forward(const Tensor<T>& x) const {
  check_input(x);
  auto h = space_to_depth(x, options_.squeeze_factor);
  auto logdet = Tensor<T>::zeros({x.dim(0)});
  for (std::size_t b = 0; b < couplings_.size(); ++b) {
    auto [a, ld_a] = actnorms_[b].forward(h);
    auto p = reverse_channels(a);
    auto [c, ld_c] = couplings_[b].forward(p);
    logdet = logdet + ld_a + ld_c;
    h = c;
  }
  return {h, logdet};
}

template <typename T>
LatentCode<T> FlowModel<T>::inverse_with_logdet(const Tensor<T>& z) const {
  const int f = options_.squeeze_factor;
  if (z.rank() != 4 || z.dim(1) != latent_channels_) {
    throw ShapeError("latent " + shape_str(z.shape()) + " must be B x " +
                     std::to_string(latent_channels_) + " x h x w");
  }
  (void)f;
  auto h = z;
  auto logdet = Tensor<T>::zeros({z.dim(0)});
  for (std::size_t i = couplings_.size(); i-- > 0;) {
    auto [c, ld_c] = couplings_[i].inverse(h);
    auto p = reverse_channels(c);
    auto [a, ld_a] = actnorms_[i].inverse(p);
    logdet = logdet + ld_c + ld_a;
    h = a;
  }
  return {depth_to_space(h, options_.squeeze_factor), logdet};
}

template <typename T>
Tensor<T> FlowModel<T>::inverse(const Tensor<T>& z) const {
  return inverse_with_logdet(z).z;
}

template <typename T>
void FlowModel<T>::data_init(const Tensor<T>& x) {
  check_input(x);
  NoGradGuard no_grad;
  auto h = space_to_depth(x.detach(), options_.squeeze_factor);
  for (std::size_t b = 0; b < couplings_.size(); ++b) {
    actnorms_[b].data_init(h);
    h = actnorms_[b].forward(h).first;
    h = reverse_channels(h);
    h = couplings_[b].forward(h).first;
  }
}

template <typename T>
ParameterRegistry<T> FlowModel<T>::parameters() const {
  ParameterRegistry<T> params, buffers;
  for (std::size_t b = 0; b < couplings_.size(); ++b) {
    const std::string prefix = options_.name + ".block" + std::to_string(b);
    actnorms_[b].collect(prefix + ".actnorm", params, buffers);
    couplings_[b].collect(prefix + ".coupling", params);
  }
  return params;
}

template <typename T>
ParameterRegistry<T> FlowModel<T>::buffers() const {
  ParameterRegistry<T> params, buffers;
  for (std::size_t b = 0; b < couplings_.size(); ++b) {
    const std::string prefix = options_.name + ".block" + std::to_string(b);
    actnorms_[b].collect(prefix + ".actnorm", params, buffers);
  }
  return buffers;
}

template <typename T>
void FlowModel<T>::inject_inverse_fault(bool enabled) {
  for (auto& c : couplings_) c.inject_inverse_fault(enabled);
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> translate(const FlowModel<T>& src, const FlowModel<T>& dst, const Tensor<T>& x) {
  return dst.inverse(src.forward(x).z);
}

template <typename T>
Tensor<T> nll_from_code(const LatentCode<T>& code) {
  const auto batch = code.z.dim(0);
  const double dims = static_cast<double>(code.z.numel() / batch);
  const T log_norm = static_cast<T>(0.5 * dims * std::log(2.0 * std::numbers::pi));
  auto quad = mul_scalar(sum(square(code.z), {1, 2, 3}), T(0.5));
  auto per_sample = add_scalar(quad - code.logdet, log_norm);
  return mean(per_sample);
}

template <typename T>
Tensor<T> mle_nll(const FlowModel<T>& model, const Tensor<T>& x) {
  return nll_from_code(model.forward(x));
}

template <typename T>
Tensor<T> cycleflow_forward(const FlowModel<T>& model, const Tensor<T>& x) {
  return depth_to_space(model.forward(x).z, model.options().squeeze_factor);
}

template <typename T>
Tensor<T> cycleflow_inverse(const FlowModel<T>& model, const Tensor<T>& y) {
  return model.inverse(space_to_depth(y, model.options().squeeze_factor));
}

#define FLOWREG_INSTANTIATE_FLOW(T)                                                   \
  template class ActNorm<T>;                                                          \
  template class AffineCoupling<T>;                                                   \
  template class FlowModel<T>;                                                        \
  template Tensor<T> translate(const FlowModel<T>&, const FlowModel<T>&, const Tensor<T>&); \
  template Tensor<T> nll_from_code(const LatentCode<T>&);                             \
  template Tensor<T> mle_nll(const FlowModel<T>&, const Tensor<T>&);                  \
  template Tensor<T> cycleflow_forward(const FlowModel<T>&, const Tensor<T>&);        \
  template Tensor<T> cycleflow_inverse(const FlowModel<T>&, const Tensor<T>&);

FLOWREG_INSTANTIATE_FLOW(float)
FLOWREG_INSTANTIATE_FLOW(double)

#undef FLOWREG_INSTANTIATE_FLOW

}  // namespace flowreg
