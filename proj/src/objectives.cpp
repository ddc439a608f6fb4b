#include "flowreg/objectives.hpp"

#include <cmath>
#include <stdexcept>

#include "flowreg/ops.hpp"
#include "flowreg/warp.hpp"

namespace flowreg {

void LossWeights::validate() const {
  const std::pair<const char*, double> fields[] = {
      {"lambda_cycle", lambda_cycle}, {"beta_identity", beta_identity},
      {"lambda_x", lambda_x},         {"lambda_y", lambda_y},
      {"lambda1", lambda1},           {"lambda2", lambda2},
      {"beta1", beta1},               {"beta2", beta2},
      {"gamma1", gamma1},             {"gamma2", gamma2},
      {"w_smooth", w_smooth}};
  for (const auto& [name, value] : fields) {
    if (!std::isfinite(value) || value < 0.0) {
      throw std::invalid_argument(std::string("loss weight ") + name +
                                  " must be finite and >= 0, got " + std::to_string(value));
    }
  }
}

double LossReport::weighted_sum() const {
  double s = 0.0;
  for (const auto& t : terms) s += t.weight * t.value;
  return s;
}

const LossTerm* LossReport::find(std::string_view name) const {
  for (const auto& t : terms)
    if (t.name == name) return &t;
  return nullptr;
}

std::string LossReport::first_non_finite() const {
  for (const auto& t : terms)
    if (!std::isfinite(t.value)) return t.name;
  if (!std::isfinite(total)) return "total";
  return {};
}

template <typename T>
Tensor<T> gan_loss(const Tensor<T>& d_out, bool target_real) {
  return mean(square(add_scalar(d_out, target_real ? T(-1) : T(0))));
}

template <typename T>
Tensor<T> cycle_loss(const Tensor<T>& x, const Tensor<T>& reconstructed) {
  if (x.shape() != reconstructed.shape()) {
    throw ShapeError("cycle_loss: shape mismatch " + shape_str(x.shape()) + " vs " +
                     shape_str(reconstructed.shape()));
  }
  return mean(abs(x - reconstructed));
}

template <typename T>
Tensor<T> identity_loss(const Tensor<T>& y, const Tensor<T>& g_of_y) {
  if (y.shape() != g_of_y.shape()) {
    throw ShapeError("identity_loss: shape mismatch " + shape_str(y.shape()) + " vs " +
                     shape_str(g_of_y.shape()));
  }
  return mean(abs(y - g_of_y));
}

template <typename T>
Tensor<T> tv_loss(const Tensor<T>& img) {
  auto dx = spatial_diff(img, 3);
  auto dy = spatial_diff(img, 2);
  const T count = static_cast<T>(dx.numel() + dy.numel());
  return mul_scalar(sum(abs(dx)) + sum(abs(dy)), T(1) / count);
}

template <typename T>
Tensor<T> temporal_reg_loss(const Tensor<T>& g_center, const std::vector<Tensor<T>>& g_neighbors,
                            const std::vector<Tensor<T>>& fields, int margin) {
  if (g_neighbors.empty() || g_neighbors.size() != fields.size()) {
    throw std::invalid_argument("temporal_reg_loss: need one field per neighbor slice, got " +
                                std::to_string(g_neighbors.size()) + " neighbors and " +
                                std::to_string(fields.size()) + " fields");
  }
  Tensor<T> total;
  for (std::size_t k = 0; k < g_neighbors.size(); ++k) {
    if (!g_neighbors[k].defined() || !fields[k].defined()) {
      throw std::invalid_argument("temporal_reg_loss: missing neighbor slice " + std::to_string(k));
    }
    auto warped = warp(g_neighbors[k], fields[k].detach());
    auto term = mean(abs(crop_spatial(g_center - warped, margin)));
    total = total.defined() ? total + term : term;
  }
  return total;
}

template <typename T>
Tensor<T> discriminator_loss(const LayerStack<T>& d, const Tensor<T>& real, const Tensor<T>& fake) {
  auto real_term = gan_loss(d.forward(real), true);
  auto fake_term = gan_loss(d.forward(fake.detach()), false);
  return mul_scalar(real_term + fake_term, T(0.5));
}

namespace {

template <typename T>
class Accumulator {
 public:
  void add(const char* name, const Tensor<T>& value, double weight) {
    report_.terms.push_back({name, static_cast<double>(value.item()), weight});
    auto weighted = weight == 1.0 ? value : mul_scalar(value, static_cast<T>(weight));
    total_ = total_.defined() ? total_ + weighted : weighted;
  }
  ObjectiveResult<T> finish() {
    report_.total = static_cast<double>(total_.item());
    return {total_, report_};
  }

 private:
  Tensor<T> total_;
  LossReport report_;
};

// Returns the translated batches (X -> Y, Y -> X).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> add_alignflow_terms(Accumulator<T>& acc, const Tensor<T>& x, const Tensor<T>& y,
                         const FlowPair<T>& g, const DiscriminatorPair<T>& d,
                         const LossWeights& w) {
  auto code_x = g.gx.forward(x);
  auto code_y = g.gy.forward(y);
  auto fake_y = g.gy.inverse(code_x.z);
  auto fake_x = g.gx.inverse(code_y.z);
  acc.add("gan_xy", gan_loss(d.dy.forward(fake_y), true), 1.0);
  acc.add("gan_yx", gan_loss(d.dx.forward(fake_x), true), 1.0);
  acc.add("nll_x", nll_from_code(code_x), w.lambda_x);
  acc.add("nll_y", nll_from_code(code_y), w.lambda_y);
  return {fake_y, fake_x};
}

}  // namespace

template <typename T>
ObjectiveResult<T> alignflow_objective(const Tensor<T>& x, const Tensor<T>& y,
                                       const FlowPair<T>& g, const DiscriminatorPair<T>& d,
                                       const LossWeights& w) {
  Accumulator<T> acc;
  add_alignflow_terms(acc, x, y, g, d, w);
  return acc.finish();
}

template <typename T>
ObjectiveResult<T> flowreg_objective(const TripletBatch<T>& x, const TripletBatch<T>& y,
                                     const FlowPair<T>& g, const DiscriminatorPair<T>& d,
                                     const RegNetPair<T>& reg, const LossWeights& w,
                                     int temporal_margin) {
  Accumulator<T> acc;
  auto [fake_y, fake_x] = add_alignflow_terms(acc, x.center, y.center, g, d, w);

  auto xy = [&](const Tensor<T>& v) { return translate(g.gx, g.gy, v); };
  auto yx = [&](const Tensor<T>& v) { return translate(g.gy, g.gx, v); };

  auto reg_x_prev = registration_loss(x.center, x.prev, reg.reg_x, w.w_smooth);
  auto reg_x_next = registration_loss(x.center, x.next, reg.reg_x, w.w_smooth);
  auto reg_y_prev = registration_loss(y.center, y.prev, reg.reg_y, w.w_smooth);
  auto reg_y_next = registration_loss(y.center, y.next, reg.reg_y, w.w_smooth);

  acc.add("temporal_x",
          temporal_reg_loss<T>(fake_y, {xy(x.prev), xy(x.next)}, {reg_x_prev.phi, reg_x_next.phi},
                               temporal_margin),
          w.lambda1);
  acc.add("temporal_y",
          temporal_reg_loss<T>(fake_x, {yx(y.prev), yx(y.next)}, {reg_y_prev.phi, reg_y_next.phi},
                               temporal_margin),
          w.lambda2);
  acc.add("reg_x", reg_x_prev.loss + reg_x_next.loss, w.beta1);
  acc.add("reg_y", reg_y_prev.loss + reg_y_next.loss, w.beta2);
  acc.add("tv_x", tv_loss(fake_y), w.gamma1);
  acc.add("tv_y", tv_loss(fake_x), w.gamma2);
  return acc.finish();
}

template <typename T>
ObjectiveResult<T> cyclegan_objective(const Tensor<T>& x, const Tensor<T>& y,
                                      const LayerStack<T>& g_xy, const LayerStack<T>& g_yx,
                                      const DiscriminatorPair<T>& d, const LossWeights& w) {
  Accumulator<T> acc;
  auto fake_y = g_xy.forward(x);
  auto fake_x = g_yx.forward(y);
  acc.add("gan_xy", gan_loss(d.dy.forward(fake_y), true), 1.0);
  acc.add("gan_yx", gan_loss(d.dx.forward(fake_x), true), 1.0);
  acc.add("cycle_x", cycle_loss(x, g_yx.forward(fake_y)), w.lambda_cycle);
  acc.add("cycle_y", cycle_loss(y, g_xy.forward(fake_x)), w.lambda_cycle);
  acc.add("identity_x", identity_loss(x, g_yx.forward(x)), w.beta_identity);
  acc.add("identity_y", identity_loss(y, g_xy.forward(y)), w.beta_identity);
  return acc.finish();
}

template <typename T>
ObjectiveResult<T> cycleflow_objective(const Tensor<T>& x, const Tensor<T>& y,
                                       const FlowModel<T>& f, const DiscriminatorPair<T>& d) {
  Accumulator<T> acc;
  acc.add("gan_xy", gan_loss(d.dy.forward(cycleflow_forward(f, x)), true), 1.0);
  acc.add("gan_yx", gan_loss(d.dx.forward(cycleflow_inverse(f, y)), true), 1.0);
  return acc.finish();
}

#define FLOWREG_INSTANTIATE_OBJECTIVES(T)                                                       \
  template Tensor<T> gan_loss(const Tensor<T>&, bool);                                          \
  template Tensor<T> cycle_loss(const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> identity_loss(const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> tv_loss(const Tensor<T>&);                                                 \
  template Tensor<T> temporal_reg_loss(const Tensor<T>&, const std::vector<Tensor<T>>&,         \
                                       const std::vector<Tensor<T>>&, int);                     \
  template Tensor<T> discriminator_loss(const LayerStack<T>&, const Tensor<T>&,                 \
                                        const Tensor<T>&);                                      \
  template ObjectiveResult<T> alignflow_objective(const Tensor<T>&, const Tensor<T>&,           \
                                                  const FlowPair<T>&,                           \
                                                  const DiscriminatorPair<T>&,                  \
                                                  const LossWeights&);                          \
  template ObjectiveResult<T> flowreg_objective(const TripletBatch<T>&, const TripletBatch<T>&, \
                                                const FlowPair<T>&, const DiscriminatorPair<T>&, \
                                                const RegNetPair<T>&, const LossWeights&, int);  \
  template ObjectiveResult<T> cyclegan_objective(const Tensor<T>&, const Tensor<T>&,            \
                                                 const LayerStack<T>&, const LayerStack<T>&,    \
                                                 const DiscriminatorPair<T>&,                   \
                                                 const LossWeights&);                           \
  template ObjectiveResult<T> cycleflow_objective(const Tensor<T>&, const Tensor<T>&,           \
                                                  const FlowModel<T>&,                          \
                                                  const DiscriminatorPair<T>&);

FLOWREG_INSTANTIATE_OBJECTIVES(float)
FLOWREG_INSTANTIATE_OBJECTIVES(double)

#undef FLOWREG_INSTANTIATE_OBJECTIVES

}  // namespace flowreg
