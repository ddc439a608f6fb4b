#include <gtest/gtest.h>

#include <cmath>

#include "flowreg/grad_check.hpp"
#include "flowreg/optim.hpp"
#include "flowreg/warp.hpp"
#include "test_util.hpp"

namespace flowreg {
namespace {

using testing::bitwise_equal;
using testing::random_tensor;

TensorD constant_field(std::int64_t h, std::int64_t w, double dx, double dy) {
  std::vector<double> v(static_cast<std::size_t>(2 * h * w));
  for (std::int64_t i = 0; i < h * w; ++i) {
    v[static_cast<std::size_t>(i)] = dx;
    v[static_cast<std::size_t>(h * w + i)] = dy;
  }
  return TensorD({1, 2, h, w}, std::move(v));
}

double at(const TensorD& t, std::int64_t y, std::int64_t x) {
  return t.data()[static_cast<std::size_t>(y * t.dim(3) + x)];
}

TEST(Warp, UnitShiftMovesColumns) {
  const auto img = random_tensor<double>({1, 1, 5, 6}, 1);
  const auto out = warp(img, constant_field(5, 6, 1.0, 0.0));
  for (int y = 0; y < 5; ++y) {
    for (int x = 0; x < 5; ++x) EXPECT_DOUBLE_EQ(at(out, y, x), at(img, y, x + 1));
    EXPECT_DOUBLE_EQ(at(out, y, 5), at(img, y, 5));  // border replicated
  }
}

TEST(Warp, VerticalShiftMovesRows) {
  const auto img = random_tensor<double>({1, 1, 5, 6}, 2);
  const auto out = warp(img, constant_field(5, 6, 0.0, -1.0));
  for (int x = 0; x < 6; ++x) {
    EXPECT_DOUBLE_EQ(at(out, 0, x), at(img, 0, x));
    for (int y = 1; y < 5; ++y) EXPECT_DOUBLE_EQ(at(out, y, x), at(img, y - 1, x));
  }
}

TEST(Warp, HalfPixelShiftAveragesNeighbours) {
  std::vector<double> ramp(4 * 8);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 8; ++x) ramp[static_cast<std::size_t>(y * 8 + x)] = x * x + 0.5 * y;
  const TensorD img({1, 1, 4, 8}, ramp);
  const auto out = warp(img, constant_field(4, 8, 0.5, 0.0));
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 7; ++x) {
      EXPECT_NEAR(at(out, y, x), 0.5 * (at(img, y, x) + at(img, y, x + 1)), 1e-12);
    }
}

TEST(Warp, ZeroFieldIsBitwiseIdentity) {
  const auto img = random_tensor<double>({2, 3, 7, 5}, 3);
  EXPECT_TRUE(bitwise_equal(warp(img, TensorD::zeros({2, 2, 7, 5})), img));
}

TEST(Warp, ShapeMismatchThrows) {
  EXPECT_THROW(warp(TensorD::zeros({1, 1, 4, 4}), TensorD::zeros({1, 2, 4, 5})), ShapeError);
  EXPECT_THROW(warp(TensorD::zeros({1, 1, 4, 4}), TensorD::zeros({1, 1, 4, 4})), ShapeError);
}

TEST(Warp, GradientsMatchFiniteDifferences) {
  const auto img = random_tensor<double>({1, 2, 6, 6}, 4);
  // Fractional displacements away from integer kinks and from the border.
  auto phi = random_tensor<double>({1, 2, 6, 6}, 5, 0.3);
  for (auto& v : phi.data_mut()) v = std::clamp(v, -0.45, 0.45) + 0.013;
  const auto r = random_tensor<double>({1, 2, 6, 6}, 6);
  EXPECT_LT(grad_check([&](const TensorD& v) { return sum(warp(v, phi) * r); }, img), 1e-6);
  EXPECT_LT(grad_check([&](const TensorD& v) { return sum(crop_spatial(warp(img, v) * r, 1)); }, phi),
            1e-6);
}

TEST(Smoothness, ConstantFieldIsZero) {
  EXPECT_EQ(smoothness(constant_field(5, 5, 1.7, -0.3)).item(), 0.0);
}

TEST(Smoothness, UnitStep) {
  // Horizontal step of height 1 in the x component of a 4x4 field: 4 unit
  // differences among 48 pooled forward differences.
  std::vector<double> v(32, 0.0);
  for (int y = 0; y < 4; ++y)
    for (int x = 2; x < 4; ++x) v[static_cast<std::size_t>(y * 4 + x)] = 1.0;
  EXPECT_NEAR(smoothness(TensorD({1, 2, 4, 4}, v)).item(), 4.0 / 48.0, 1e-15);
}

TEST(Smoothness, GradientMatchesFiniteDifferences) {
  const auto phi = random_tensor<double>({2, 2, 5, 4}, 7);
  EXPECT_LT(grad_check([](const TensorD& v) { return smoothness(v); }, phi), 1e-6);
}

TensorD blob(double cx, double cy, int size) {
  std::vector<double> v(static_cast<std::size_t>(size * size));
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double r2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
      v[static_cast<std::size_t>(y * size + x)] = std::exp(-r2 / 18.0);
    }
  return TensorD({1, 1, size, size}, v);
}

TEST(Registration, IdenticalSlicesGiveZeroLoss) {
  const auto reg = build_regnet<double>(2, {.name = "reg", .base_channels = 4, .seed = 1});
  const auto x = random_tensor<double>({2, 1, 16, 16}, 8);
  const auto r = registration_loss(x, x, reg, 1.0);
  EXPECT_EQ(r.loss.item(), 0.0);
  EXPECT_EQ(r.phi.shape(), (Shape{2, 2, 16, 16}));
}

TEST(Registration, LossIsNonNegative) {
  const auto reg = build_regnet<double>(2, {.name = "reg", .base_channels = 4, .seed = 2});
  randomize_parameters(reg.parameters(), 3, 0.2);
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto r = registration_loss(random_tensor<double>({1, 1, 16, 16}, s),
                                     random_tensor<double>({1, 1, 16, 16}, s + 10), reg, 1.0);
    EXPECT_GE(r.loss.item(), 0.0);
    EXPECT_GE(r.similarity.item(), 0.0);
    EXPECT_GE(r.smoothness.item(), 0.0);
    EXPECT_NEAR(r.loss.item(), r.similarity.item() + r.smoothness.item(), 1e-12);
  }
}

TEST(Registration, DescentRecoversShift) {
  const auto reg = build_regnet<float>(2, {.name = "reg", .base_channels = 8, .seed = 4});
  const auto fixed_d = blob(16.0, 15.0, 32), moving_d = blob(18.0, 15.0, 32);
  const TensorF fixed(fixed_d.shape(), {fixed_d.data().begin(), fixed_d.data().end()});
  const TensorF moving(moving_d.shape(), {moving_d.data().begin(), moving_d.data().end()});
  Adam<float> opt("reg", reg.parameters(), {1e-3});
  const double initial = registration_loss(fixed, moving, reg, 0.1).similarity.item();
  for (int i = 0; i < 200; ++i) {
    opt.zero_grad();
    registration_loss(fixed, moving, reg, 0.1).loss.backward();
    opt.step();
  }
  const auto r = registration_loss(fixed, moving, reg, 0.1);
  EXPECT_LT(r.similarity.item(), 0.25 * initial);
  // Mean horizontal displacement near the blob points toward the moving copy.
  double mean_dx = 0.0;
  for (int y = 12; y < 19; ++y)
    for (int x = 13; x < 20; ++x) mean_dx += r.phi.data()[static_cast<std::size_t>(y * 32 + x)];
  EXPECT_GT(mean_dx / 49.0, 0.5);
}

}  // namespace
}  // namespace flowreg
