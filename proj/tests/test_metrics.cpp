#include <gtest/gtest.h>

#include <cmath>
#include <nlohmann/json.hpp>

#include "flowreg/metrics.hpp"
#include "test_util.hpp"

namespace flowreg {
namespace {

using testing::random_image;
using testing::TempDir;

// Direct SSIM: every valid window position, explicit 2-D Gaussian weights.
double reference_ssim(const Image& a, const Image& b, double peak) {
  constexpr int n = 11;
  constexpr double sigma = 1.5;
  double w[n][n], total = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      w[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / (2 * sigma * sigma));
      total += w[i][j];
    }
  const double c1 = std::pow(0.01 * peak, 2), c2 = std::pow(0.03 * peak, 2);
  double sum = 0.0;
  int count = 0;
  for (int y = 0; y + n <= a.height; ++y)
    for (int x = 0; x + n <= a.width; ++x) {
      double ma = 0, mb = 0;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          ma += w[i][j] / total * a.at(y + i, x + j);
          mb += w[i][j] / total * b.at(y + i, x + j);
        }
      double va = 0, vb = 0, cov = 0;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          const double da = a.at(y + i, x + j) - ma, db = b.at(y + i, x + j) - mb;
          va += w[i][j] / total * da * da;
          vb += w[i][j] / total * db * db;
          cov += w[i][j] / total * da * db;
        }
      sum += (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  return sum / count;
}

TEST(Mse, HandComputed) {
  EXPECT_DOUBLE_EQ(mse(Image(3, 4, -1.0), Image(3, 4, 1.0)), 4.0);
  const auto a = random_image(1, 6, 5, -1, 1), b = random_image(2, 6, 5, -1, 1);
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a.pixels[i] - b.pixels[i]) * (a.pixels[i] - b.pixels[i]);
  EXPECT_NEAR(mse(a, b), s / 30.0, 1e-15);
  EXPECT_THROW(mse(Image(2, 2), Image(2, 3)), std::invalid_argument);
}

TEST(Psnr, KnownValues) {
  EXPECT_NEAR(psnr(0.01, 1.0), 20.0, 1e-9);
  EXPECT_NEAR(psnr(0.0179), 10 * std::log10(4 / 0.0179), 1e-12);
  EXPECT_NEAR(psnr(0.0179), 23.49, 0.01);
  EXPECT_EQ(psnr(0.0), kPsnrCap);
  EXPECT_THROW(psnr(-1e-3), std::invalid_argument);
}

TEST(Ssim, IdenticalImagesGiveOne) {
  const auto a = random_image(3, 20, 17, -1, 1);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
}

TEST(Ssim, ConstantImages) {
  const double c1 = std::pow(0.01 * 2.0, 2);
  EXPECT_NEAR(ssim(Image(12, 12, 1.0), Image(12, 12, 0.0)), c1 / (1.0 + c1), 1e-12);
}

TEST(Ssim, MatchesDirectComputation) {
  for (std::uint64_t s = 0; s < 4; ++s) {
    const auto a = random_image(10 + s, 16, 19, -1, 1);
    auto b = a;
    const auto noise = random_image(20 + s, 16, 19, -0.4, 0.4);
    for (std::size_t i = 0; i < b.size(); ++i) b.pixels[i] += noise.pixels[i];
    EXPECT_NEAR(ssim(a, b), reference_ssim(a, b, 2.0), 1e-6);
    EXPECT_LT(ssim(a, b), 1.0);
  }
}

TEST(Ssim, SymmetricAndBounded) {
  const auto a = random_image(5, 14, 14, -1, 1), b = random_image(6, 14, 14, -1, 1);
  EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-14);
  EXPECT_LE(std::abs(ssim(a, b)), 1.0);
}

TEST(Ssim, TooSmallThrows) { EXPECT_THROW(ssim(Image(10, 20), Image(10, 20)), std::invalid_argument); }

TEST(Ssim, GaussianWindowIsNormalized) {
  const auto k = gaussian_window(11, 1.5);
  double s = 0.0;
  for (double v : k) s += v;
  EXPECT_NEAR(s, 1.0, 1e-15);
  EXPECT_NEAR(k[4] / k[5], std::exp(-1.0 / 4.5), 1e-14);
}

TEST(Aggregate, MeansAndPopulationStd) {
  const auto r = aggregate("A2B", {{"a", 1.0, 10.0, 0.5}, {"b", 3.0, 20.0, 0.7}});
  EXPECT_DOUBLE_EQ(r.mean_mse, 2.0);
  EXPECT_DOUBLE_EQ(r.mean_psnr, 15.0);
  EXPECT_DOUBLE_EQ(r.mean_ssim, 0.6);
  EXPECT_DOUBLE_EQ(r.std_mse, 1.0);
  EXPECT_DOUBLE_EQ(r.std_psnr, 5.0);
  EXPECT_NEAR(r.std_ssim, 0.1, 1e-15);
  const auto j = nlohmann::json::parse(r.to_json());
  EXPECT_EQ(j["direction"], "A2B");
}

TEST(EvaluateSet, HandComputedMeans) {
  TempDir dir("metrics");
  const auto pred = dir.path() / "pred", ref = dir.path() / "ref";
  std::filesystem::create_directories(pred);
  std::filesystem::create_directories(ref);
  // Values 0, 1 and 0.5 are exact at 8 bits only for 0 and 1; use those.
  write_png(ref / "a.png", Image(12, 12, 1.0));
  write_png(pred / "a.png", Image(12, 12, 0.0));  // [-1,1] difference 2 -> mse 4
  write_png(ref / "b.png", Image(12, 12, 1.0));
  write_png(pred / "b.png", Image(12, 12, 1.0));  // identical -> mse 0
  const auto r = evaluate_set(pred, ref, "A2B");
  ASSERT_EQ(r.images.size(), 2u);
  EXPECT_EQ(r.images[0].name, "a.png");
  EXPECT_DOUBLE_EQ(r.mean_mse, 2.0);
  EXPECT_DOUBLE_EQ(r.mean_psnr, 0.5 * (10 * std::log10(4.0 / 4.0) + kPsnrCap));
  const double c1 = std::pow(0.02, 2);
  EXPECT_NEAR(r.mean_ssim, 0.5 * ((-2 + c1) / (2 + c1) + 1.0), 1e-12);
}

TEST(EvaluateSet, IdenticalSets) {
  TempDir dir("metrics_same");
  for (int i = 0; i < 3; ++i) write_png(dir.path() / ("s" + std::to_string(i) + ".png"), random_image(i, 16, 16), 16);
  const auto r = evaluate_set(dir.path(), dir.path());
  EXPECT_EQ(r.mean_mse, 0.0);
  EXPECT_EQ(r.mean_psnr, kPsnrCap);
  EXPECT_NEAR(r.mean_ssim, 1.0, 1e-12);
}

TEST(EvaluateSet, MismatchedNamesThrow) {
  TempDir dir("metrics_bad");
  const auto pred = dir.path() / "pred", ref = dir.path() / "ref";
  std::filesystem::create_directories(pred);
  std::filesystem::create_directories(ref);
  write_png(ref / "x.png", Image(12, 12, 0.5));
  write_png(pred / "y.png", Image(12, 12, 0.5));
  try {
    evaluate_set(pred, ref);
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("y.png"), std::string::npos);
  }
}

TEST(Montage, PanelsAndGaps) {
  const auto m = montage({Image(2, 2, 0.2), Image(3, 1, 0.8)}, 1.0);
  EXPECT_EQ(m.height, 3);
  EXPECT_EQ(m.width, 4);
  EXPECT_EQ(m.at(0, 0), 0.2);
  EXPECT_EQ(m.at(0, 2), 1.0);
  EXPECT_EQ(m.at(2, 0), 1.0);
  EXPECT_EQ(m.at(2, 3), 0.8);
}

}  // namespace
}  // namespace flowreg
