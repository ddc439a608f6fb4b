#pragma once

// Differentiable bilinear warping and the unsupervised registration loss.

#include "flowreg/nn.hpp"
#include "flowreg/tensor.hpp"

namespace flowreg {

// out[b,c,y,x] = img sampled bilinearly at (x + phi[b,0,y,x], y + phi[b,1,y,x]).
// Displacements are in pixels. Sample coordinates are clamped to the image,
// so out-of-range samples replicate the border; a clamped coordinate passes
// no gradient to phi. A zero field returns the input bitwise.
template <typename T>
Tensor<T> warp(const Tensor<T>& img, const Tensor<T>& phi);

// Mean of squared forward differences of phi, pooled over both axes and both
// displacement components.
template <typename T>
Tensor<T> smoothness(const Tensor<T>& phi);

template <typename T>
struct RegistrationResult {
  Tensor<T> loss;        // similarity + w_smooth * smoothness
  Tensor<T> similarity;  // mean (x_t - x_k o phi)^2
  Tensor<T> smoothness;
  Tensor<T> phi;         // B x 2 x H x W, moves x_k onto x_t
};

template <typename T>
RegistrationResult<T> registration_loss(const Tensor<T>& x_t, const Tensor<T>& x_k,
                                        const RegNet<T>& regnet, double w_smooth);

}  // namespace flowreg
