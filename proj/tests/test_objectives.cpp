#include <gtest/gtest.h>

#include <cmath>

#include "flowreg/objectives.hpp"
#include "flowreg/warp.hpp"
#include "test_util.hpp"

namespace flowreg {
namespace {

using testing::random_tensor;

TensorD shift_right(const TensorD& img) {
  // out[y][x] = img[y][x - 1], first column replicated.
  const auto H = img.dim(2), W = img.dim(3);
  std::vector<double> v(img.data().begin(), img.data().end());
  for (std::int64_t y = 0; y < H; ++y)
    for (std::int64_t x = W - 1; x >= 1; --x) v[static_cast<std::size_t>(y * W + x)] = v[static_cast<std::size_t>(y * W + x - 1)];
  return TensorD(img.shape(), v);
}

TensorD field(std::int64_t h, std::int64_t w, double dx) {
  std::vector<double> v(static_cast<std::size_t>(2 * h * w), 0.0);
  for (std::int64_t i = 0; i < h * w; ++i) v[static_cast<std::size_t>(i)] = dx;
  return TensorD({1, 2, h, w}, v);
}

TEST(GanLoss, LeastSquaresTargets) {
  EXPECT_EQ(gan_loss(TensorD::ones({1, 1, 2, 2}), true).item(), 0.0);
  EXPECT_EQ(gan_loss(TensorD::zeros({1, 1, 2, 2}), false).item(), 0.0);
  EXPECT_DOUBLE_EQ(gan_loss(TensorD::full({1, 1, 2, 2}, 0.5), true).item(), 0.25);
  EXPECT_DOUBLE_EQ(gan_loss(TensorD::full({1, 1, 2, 2}, 0.5), false).item(), 0.25);
  EXPECT_DOUBLE_EQ(gan_loss(TensorD({1, 1, 1, 2}, {0.0, 1.0}), true).item(), 0.5);
}

TEST(CycleLoss, MeanAbsoluteError) {
  EXPECT_DOUBLE_EQ(cycle_loss(TensorD::zeros({1, 1, 2, 2}), TensorD::ones({1, 1, 2, 2})).item(), 1.0);
  EXPECT_DOUBLE_EQ(identity_loss(TensorD({1, 1, 1, 2}, {0.0, 1.0}), TensorD({1, 1, 1, 2}, {1.0, 1.0})).item(),
                   0.5);
  EXPECT_THROW(cycle_loss(TensorD::zeros({1, 1, 2, 2}), TensorD::zeros({1, 1, 2, 3})), ShapeError);
}

TEST(TvLoss, HandComputed) {
  EXPECT_DOUBLE_EQ(tv_loss(TensorD({1, 1, 2, 2}, {0.0, 1.0, 0.0, 1.0})).item(), 0.5);
  EXPECT_EQ(tv_loss(TensorD::full({2, 1, 5, 4}, 0.3)).item(), 0.0);
  // 3x3 with a single bright center: 4 of the 12 pairs differ by 2.
  std::vector<double> v(9, 0.0);
  v[4] = 2.0;
  EXPECT_DOUBLE_EQ(tv_loss(TensorD({1, 1, 3, 3}, v)).item(), 8.0 / 12.0);
}

TEST(TemporalLoss, ExactFieldGivesZero) {
  const auto center = random_tensor<double>({1, 1, 10, 10}, 1);
  const auto prev = shift_right(center);
  const auto next = shift_right(center);
  const auto phi = field(10, 10, 1.0);
  EXPECT_NEAR(temporal_reg_loss<double>(center, {prev, next}, {phi, phi}, 2).item(), 0.0, 1e-15);
  // Without the field the mismatch is visible.
  const auto zero = field(10, 10, 0.0);
  EXPECT_GT(temporal_reg_loss<double>(center, {prev, next}, {zero, zero}, 2).item(), 0.1);
}

TEST(TemporalLoss, SumsOverNeighbours) {
  const auto center = random_tensor<double>({1, 1, 8, 8}, 2);
  const auto other = random_tensor<double>({1, 1, 8, 8}, 3);
  const auto zero = field(8, 8, 0.0);
  const double one = temporal_reg_loss<double>(center, {other}, {zero}, 1).item();
  const double two = temporal_reg_loss<double>(center, {other, other}, {zero, zero}, 1).item();
  EXPECT_NEAR(two, 2 * one, 1e-14);
}

TEST(TemporalLoss, MissingNeighbourThrows) {
  const auto c = TensorD::zeros({1, 1, 4, 4});
  const auto phi = field(4, 4, 0.0);
  EXPECT_THROW(temporal_reg_loss<double>(c, {}, {}, 0), std::invalid_argument);
  EXPECT_THROW(temporal_reg_loss<double>(c, {c}, {phi, phi}, 0), std::invalid_argument);
  EXPECT_THROW(temporal_reg_loss<double>(c, {c, TensorD()}, {phi, phi}, 0), std::invalid_argument);
}

TEST(TemporalLoss, FieldReceivesNoGradient) {
  auto phi = field(6, 6, 0.3);
  phi.set_requires_grad(true);
  auto g = random_tensor<double>({1, 1, 6, 6}, 4);
  g.set_requires_grad(true);
  temporal_reg_loss<double>(g, {random_tensor<double>({1, 1, 6, 6}, 5)}, {phi}, 1).backward();
  for (double v : phi.grad()) EXPECT_EQ(v, 0.0);
  double m = 0.0;
  for (double v : g.grad()) m = std::max(m, std::abs(v));
  EXPECT_GT(m, 0.0);
}

TEST(LossWeights, DefaultsAndValidation) {
  const LossWeights w;
  EXPECT_EQ(w.lambda_x, 1e-5);
  EXPECT_EQ(w.lambda_y, 1e-5);
  EXPECT_EQ(w.lambda_cycle, 10.0);
  EXPECT_EQ(w.lambda1, 10.0);
  EXPECT_EQ(w.lambda2, 10.0);
  EXPECT_EQ(w.beta1, 1.0);
  EXPECT_EQ(w.beta2, 1.0);
  EXPECT_EQ(w.gamma1, 1.0);
  EXPECT_EQ(w.gamma2, 1.0);
  EXPECT_EQ(w.beta_identity, 5.0);
  EXPECT_NO_THROW(w.validate());
  LossWeights bad;
  bad.gamma2 = -1.0;
  try {
    bad.validate();
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("gamma2"), std::string::npos);
  }
  bad.gamma2 = std::nan("");
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

struct Nets {
  FlowModel<double> gx{1, {.name = "gx", .blocks = 2, .hidden_channels = 4, .seed = 1}};
  FlowModel<double> gy{1, {.name = "gy", .blocks = 2, .hidden_channels = 4, .seed = 2}};
  LayerStack<double> dx = build_patchgan<double>(1, {.name = "dx", .base_channels = 2, .seed = 3});
  LayerStack<double> dy = build_patchgan<double>(1, {.name = "dy", .base_channels = 2, .seed = 4});
  RegNet<double> rx = build_regnet<double>(2, {.name = "rx", .base_channels = 2, .seed = 5});
  RegNet<double> ry = build_regnet<double>(2, {.name = "ry", .base_channels = 2, .seed = 6});
  Nets() {
    randomize_parameters(gx.parameters(), 7, 0.2);
    randomize_parameters(gy.parameters(), 8, 0.2);
    randomize_parameters(rx.parameters(), 9, 0.2);
    randomize_parameters(ry.parameters(), 10, 0.2);
  }
};

TripletBatch<double> triplets(std::uint64_t seed) {
  return {random_tensor<double>({1, 1, 32, 32}, seed), random_tensor<double>({1, 1, 32, 32}, seed + 1),
          random_tensor<double>({1, 1, 32, 32}, seed + 2)};
}

TEST(Objectives, AlignflowTotalIsWeightedSum) {
  Nets n;
  LossWeights w;
  w.lambda_x = 0.3;
  w.lambda_y = 0.7;
  const auto x = random_tensor<double>({2, 1, 32, 32}, 11), y = random_tensor<double>({2, 1, 32, 32}, 12);
  const auto r = alignflow_objective(x, y, {n.gx, n.gy}, {n.dx, n.dy}, w);
  ASSERT_EQ(r.report.terms.size(), 4u);
  EXPECT_NEAR(r.total.item(), r.report.weighted_sum(), 1e-10);
  EXPECT_NEAR(r.report.find("nll_x")->value, mle_nll(n.gx, x).item(), 1e-10);
  EXPECT_EQ(r.report.find("nll_y")->weight, 0.7);
  // Default weight keeps the likelihood term at 1e-5 of the NLL.
  const auto d = alignflow_objective(x, y, {n.gx, n.gy}, {n.dx, n.dy}, LossWeights{});
  const double adv = d.report.find("gan_xy")->value + d.report.find("gan_yx")->value;
  EXPECT_NEAR(d.total.item() - adv,
              1e-5 * (mle_nll(n.gx, x).item() + mle_nll(n.gy, y).item()), 1e-10);
  w.lambda_x = w.lambda_y = 0.0;
  EXPECT_NEAR(alignflow_objective(x, y, {n.gx, n.gy}, {n.dx, n.dy}, w).total.item(), adv, 1e-12);
}

TEST(Objectives, FlowregTermsAndReduction) {
  Nets n;
  const auto x = triplets(20), y = triplets(30);
  const auto r = flowreg_objective(x, y, {n.gx, n.gy}, {n.dx, n.dy}, {n.rx, n.ry}, LossWeights{}, 2);
  const std::vector<std::string> names{"gan_xy", "gan_yx", "nll_x", "nll_y", "temporal_x",
                                       "temporal_y", "reg_x", "reg_y", "tv_x", "tv_y"};
  ASSERT_EQ(r.report.terms.size(), names.size());
  for (std::size_t i = 0; i < names.size(); ++i) EXPECT_EQ(r.report.terms[i].name, names[i]);
  EXPECT_NEAR(r.total.item(), r.report.weighted_sum(), 1e-9);
  for (const auto& t : r.report.terms) {
    if (t.name.rfind("nll", 0) != 0) EXPECT_GE(t.value, 0.0) << t.name;
  }

  LossWeights zero;
  zero.lambda1 = zero.lambda2 = zero.beta1 = zero.beta2 = zero.gamma1 = zero.gamma2 = 0.0;
  const auto reduced = flowreg_objective(x, y, {n.gx, n.gy}, {n.dx, n.dy}, {n.rx, n.ry}, zero, 2);
  const auto align = alignflow_objective(x.center, y.center, {n.gx, n.gy}, {n.dx, n.dy}, zero);
  EXPECT_EQ(reduced.total.item(), align.total.item());
}

TEST(Objectives, RegistrationTermsReachOnlyRegNets) {
  Nets n;
  LossWeights w;
  w.lambda_x = w.lambda_y = w.lambda1 = w.lambda2 = w.gamma1 = w.gamma2 = 0.0;
  const auto x = triplets(40), y = triplets(50);
  // With only registration weights active the flows see the alignflow gradient.
  const auto r = flowreg_objective(x, y, {n.gx, n.gy}, {n.dx, n.dy}, {n.rx, n.ry}, w, 2);
  r.total.backward();
  double reg_grad = 0.0;
  const auto rp = n.rx.parameters();
  for (const auto& p : rp.entries())
    for (double v : p.tensor.grad()) reg_grad = std::max(reg_grad, std::abs(v));
  EXPECT_GT(reg_grad, 0.0);
  std::vector<double> g_flow;
  const auto gp = n.gx.parameters();
  for (const auto& p : gp.entries()) g_flow.insert(g_flow.end(), p.tensor.grad().begin(), p.tensor.grad().end());
  gp.zero_grad();
  n.gy.parameters().zero_grad();
  alignflow_objective(x.center, y.center, {n.gx, n.gy}, {n.dx, n.dy}, w).total.backward();
  std::size_t i = 0;
  for (const auto& p : gp.entries())
    for (double v : p.tensor.grad()) EXPECT_NEAR(v, g_flow[i++], 1e-12);
}

TEST(Objectives, CycleganWithIdentityGenerators) {
  // Empty stacks are identity maps: cycle and identity terms vanish.
  LayerStack<double> id_xy("g_xy"), id_yx("g_yx");
  Nets n;
  const auto x = random_tensor<double>({1, 1, 32, 32}, 60), y = random_tensor<double>({1, 1, 32, 32}, 61);
  const auto r = cyclegan_objective(x, y, id_xy, id_yx, {n.dx, n.dy}, LossWeights{});
  ASSERT_EQ(r.report.terms.size(), 6u);
  EXPECT_EQ(r.report.find("cycle_x")->value, 0.0);
  EXPECT_EQ(r.report.find("identity_y")->value, 0.0);
  EXPECT_EQ(r.report.find("identity_x")->weight, 5.0);
  LossWeights w;
  w.lambda_cycle = w.beta_identity = 0.0;
  const auto adv = cyclegan_objective(x, y, id_xy, id_yx, {n.dx, n.dy}, w);
  EXPECT_NEAR(adv.total.item(), adv.report.find("gan_xy")->value + adv.report.find("gan_yx")->value, 1e-12);
}

TEST(Objectives, CycleflowIsAdversarialOnly) {
  Nets n;
  const auto x = random_tensor<double>({1, 1, 32, 32}, 70), y = random_tensor<double>({1, 1, 32, 32}, 71);
  const auto r = cycleflow_objective(x, y, n.gx, {n.dx, n.dy});
  ASSERT_EQ(r.report.terms.size(), 2u);
  EXPECT_NEAR(r.total.item(), r.report.weighted_sum(), 1e-12);
}

TEST(Objectives, DiscriminatorLossIgnoresGeneratorGraph) {
  Nets n;
  auto fake = random_tensor<double>({1, 1, 32, 32}, 80);
  fake.set_requires_grad(true);
  const auto real = random_tensor<double>({1, 1, 32, 32}, 81);
  discriminator_loss(n.dy, real, fake).backward();
  EXPECT_TRUE(fake.grad().empty() || std::all_of(fake.grad().begin(), fake.grad().end(), [](double v) { return v == 0.0; }));
}

TEST(LossReport, FirstNonFinite) {
  LossReport r;
  r.terms = {{"a", 1.0, 1.0}, {"b", std::nan(""), 1.0}};
  r.total = 1.0;
  EXPECT_EQ(r.first_non_finite(), "b");
  r.terms[1].value = 2.0;
  EXPECT_EQ(r.first_non_finite(), "");
  EXPECT_DOUBLE_EQ(r.weighted_sum(), 3.0);
}

}  // namespace
}  // namespace flowreg
