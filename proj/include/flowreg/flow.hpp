#pragma once

// Invertible generators mapping images to a latent space of the same size.
//
// A FlowModel squeezes its input 2x2 into channels and then applies `blocks`
// repetitions of (actnorm, channel reversal, affine coupling). Every step is
// exactly invertible and reports log|det J|, so translating X -> Z -> Y and
// back recovers the input up to rounding.

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "flowreg/nn.hpp"
#include "flowreg/tensor.hpp"

namespace flowreg {

struct FlowOptions {
  std::string name = "gx";
  int blocks = 3;
  int hidden_channels = 64;
  double s_max = 2.0;
  int squeeze_factor = 2;
  std::uint64_t seed = 0;
};

template <typename T>
struct LatentCode {
  Tensor<T> z;       // squeezed: B x (C*f*f) x (H/f) x (W/f)
  Tensor<T> logdet;  // shape [B], log|det dz/dx| per sample
};

// Per-channel affine map y = scale * x + bias. Acts as the identity until
// data_init() sets zero-mean/unit-variance statistics from a batch.
template <typename T>
class ActNorm {
 public:
  explicit ActNorm(int channels);
  std::pair<Tensor<T>, Tensor<T>> forward(const Tensor<T>& x) const;
  std::pair<Tensor<T>, Tensor<T>> inverse(const Tensor<T>& y) const;
  void data_init(const Tensor<T>& x);
  bool initialized() const { return initialized_.data()[0] != T(0); }
  void collect(const std::string& prefix, ParameterRegistry<T>& params,
               ParameterRegistry<T>& buffers) const;

 private:
  Tensor<T> logdet(const Tensor<T>& x) const;
  Tensor<T> scale_, bias_;
  Tensor<T> initialized_;
};

// Transforms the second half of the channels conditioned on the first:
// y2 = x2 * exp(s(x1)) + t(x1), with s bounded as s_max * tanh(raw / s_max).
template <typename T>
class AffineCoupling {
 public:
  AffineCoupling(int channels, int hidden, double s_max, std::mt19937_64& rng);
  std::pair<Tensor<T>, Tensor<T>> forward(const Tensor<T>& x) const;
  std::pair<Tensor<T>, Tensor<T>> inverse(const Tensor<T>& y) const;
  // Scale and shift produced by the conditioning network for the input half.
  std::pair<Tensor<T>, Tensor<T>> scale_shift(const Tensor<T>& x1) const;
  void collect(const std::string& prefix, ParameterRegistry<T>& params) const;
  void inject_inverse_fault(bool enabled) { inverse_fault_ = enabled; }

 private:
  int channels_;
  double s_max_;
  LayerStack<T> net_;
  bool inverse_fault_ = false;
};

template <typename T>
class FlowModel {
 public:
  explicit FlowModel(int in_channels, const FlowOptions& options = {});

  LatentCode<T> forward(const Tensor<T>& x) const;
  Tensor<T> inverse(const Tensor<T>& z) const;
  LatentCode<T> inverse_with_logdet(const Tensor<T>& z) const;

  // Data-dependent actnorm initialization, block by block, from one batch.
  void data_init(const Tensor<T>& x);

  ParameterRegistry<T> parameters() const;
  // Non-trainable state (actnorm initialization flags).
  ParameterRegistry<T> buffers() const;

  const FlowOptions& options() const { return options_; }
  int in_channels() const { return in_channels_; }
  int latent_channels() const { return latent_channels_; }
  int block_count() const { return static_cast<int>(couplings_.size()); }
  int scale_count() const { return 1; }

  // Test seam: makes every coupling inverse use exp(+s) instead of exp(-s).
  void inject_inverse_fault(bool enabled);

 private:
  void check_input(const Tensor<T>& x) const;

  FlowOptions options_;
  int in_channels_;
  int latent_channels_;
  std::vector<ActNorm<T>> actnorms_;
  std::vector<AffineCoupling<T>> couplings_;
};

template <typename T>
LatentCode<T> forward_flow(const FlowModel<T>& model, const Tensor<T>& x) {
  return model.forward(x);
}

template <typename T>
Tensor<T> inverse_flow(const FlowModel<T>& model, const Tensor<T>& z) {
  return model.inverse(z);
}

// G_{src->dst} = inverse(dst) o forward(src), through the shared latent space.
template <typename T>
Tensor<T> translate(const FlowModel<T>& src, const FlowModel<T>& dst, const Tensor<T>& x);

// Negative log-likelihood under a standard normal prior, averaged over the
// batch: 0.5 * sum(z^2) + 0.5 * D * log(2 pi) - logdet.
template <typename T>
Tensor<T> mle_nll(const FlowModel<T>& model, const Tensor<T>& x);
template <typename T>
Tensor<T> nll_from_code(const LatentCode<T>& code);

// Single-model translation used by the cycleflow mode: X -> Y is the forward
// map (unsqueezed back to image layout) and Y -> X its exact inverse.
template <typename T>
Tensor<T> cycleflow_forward(const FlowModel<T>& model, const Tensor<T>& x);
template <typename T>
Tensor<T> cycleflow_inverse(const FlowModel<T>& model, const Tensor<T>& y);

}  // namespace flowreg
