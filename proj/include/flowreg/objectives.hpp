#pragma once

// Loss terms and the composite training objectives for the four modes.

#include <string>
#include <string_view>
#include <vector>

#include "flowreg/flow.hpp"
#include "flowreg/nn.hpp"
#include "flowreg/tensor.hpp"

namespace flowreg {

struct LossWeights {
  double lambda_cycle = 10.0;    // cycle consistency (cyclegan)
  double beta_identity = 5.0;    // identity mapping (cyclegan)
  double lambda_x = 1e-5;        // NLL of domain X
  double lambda_y = 1e-5;        // NLL of domain Y
  double lambda1 = 10.0;         // temporal consistency, X -> Y
  double lambda2 = 10.0;         // temporal consistency, Y -> X
  double beta1 = 1.0;            // registration of X slices
  double beta2 = 1.0;            // registration of Y slices
  double gamma1 = 1.0;           // total variation of translated X -> Y
  double gamma2 = 1.0;           // total variation of translated Y -> X
  double w_smooth = 1.0;         // field smoothness inside registration

  // Throws std::invalid_argument naming the first negative or non-finite weight.
  void validate() const;
};

struct LossTerm {
  std::string name;
  double value = 0.0;
  double weight = 1.0;
};

struct LossReport {
  std::vector<LossTerm> terms;
  double total = 0.0;

  double weighted_sum() const;
  const LossTerm* find(std::string_view name) const;
  // Name of the first term (or "total") whose value is not finite; empty if none.
  std::string first_non_finite() const;
};

template <typename T>
struct ObjectiveResult {
  Tensor<T> total;
  LossReport report;
};

// Three consecutive slices per sample, each B x 1 x H x W.
template <typename T>
struct TripletBatch {
  Tensor<T> prev, center, next;
};

// Least-squares GAN: mean((d_out - target)^2) with target 1 (real) or 0 (fake).
template <typename T>
Tensor<T> gan_loss(const Tensor<T>& d_out, bool target_real);

// L1 distance used for cycle and identity terms.
template <typename T>
Tensor<T> cycle_loss(const Tensor<T>& x, const Tensor<T>& reconstructed);
template <typename T>
Tensor<T> identity_loss(const Tensor<T>& y, const Tensor<T>& g_of_y);

// Mean absolute difference over all horizontally and vertically adjacent pairs.
template <typename T>
Tensor<T> tv_loss(const Tensor<T>& img);

// sum over k of mean |g_center - warp(g_neighbor_k, phi_k)|, computed on the
// interior after cropping `margin` pixels. Fields are detached, so no
// gradient reaches the network that produced them.
template <typename T>
Tensor<T> temporal_reg_loss(const Tensor<T>& g_center, const std::vector<Tensor<T>>& g_neighbors,
                            const std::vector<Tensor<T>>& fields, int margin = 0);

// 0.5 * (LSGAN(D(real), real) + LSGAN(D(fake), fake)); fake is detached.
template <typename T>
Tensor<T> discriminator_loss(const LayerStack<T>& d, const Tensor<T>& real, const Tensor<T>& fake);

template <typename T>
struct FlowPair {
  const FlowModel<T>& gx;
  const FlowModel<T>& gy;
};

template <typename T>
struct DiscriminatorPair {
  const LayerStack<T>& dx;
  const LayerStack<T>& dy;
};

template <typename T>
struct RegNetPair {
  const RegNet<T>& reg_x;
  const RegNet<T>& reg_y;
};

// Adversarial terms in both directions plus lambda_x NLL_X + lambda_y NLL_Y.
template <typename T>
ObjectiveResult<T> alignflow_objective(const Tensor<T>& x, const Tensor<T>& y,
                                       const FlowPair<T>& g, const DiscriminatorPair<T>& d,
                                       const LossWeights& w);

// The alignflow objective on the center slices, followed by temporal,
// registration and total-variation terms for each domain. Registration terms
// reach only the registration networks; temporal terms reach only the flows.
template <typename T>
ObjectiveResult<T> flowreg_objective(const TripletBatch<T>& x, const TripletBatch<T>& y,
                                     const FlowPair<T>& g, const DiscriminatorPair<T>& d,
                                     const RegNetPair<T>& reg, const LossWeights& w,
                                     int temporal_margin = 0);

// Adversarial + lambda_cycle * cycle + beta_identity * identity, both directions.
template <typename T>
ObjectiveResult<T> cyclegan_objective(const Tensor<T>& x, const Tensor<T>& y,
                                      const LayerStack<T>& g_xy, const LayerStack<T>& g_yx,
                                      const DiscriminatorPair<T>& d, const LossWeights& w);

// Single invertible model: X -> Y forward, Y -> X inverse. Cycle consistency
// holds by construction, so only the adversarial terms remain.
template <typename T>
ObjectiveResult<T> cycleflow_objective(const Tensor<T>& x, const Tensor<T>& y,
                                       const FlowModel<T>& f, const DiscriminatorPair<T>& d);

}  // namespace flowreg
