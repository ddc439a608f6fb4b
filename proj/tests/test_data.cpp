#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "flowreg/data.hpp"
#include "flowreg/metrics.hpp"
#include "flowreg/warp.hpp"
#include "test_util.hpp"

namespace flowreg {
namespace {

using testing::TempDir;

PhantomOptions small_options(std::uint64_t seed = 3) {
  PhantomOptions o;
  o.seed = seed;
  o.subjects = 3;
  o.test_subjects = 2;
  o.slices = 6;
  o.size = 24;
  return o;
}

bool same_stacks(const std::vector<SliceStack>& a, const std::vector<SliceStack>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].subject_id != b[i].subject_id || a[i].slices.size() != b[i].slices.size()) return false;
    for (std::size_t k = 0; k < a[i].slices.size(); ++k)
      if (a[i].slices[k].pixels != b[i].slices[k].pixels) return false;
  }
  return true;
}

TEST(Phantom, Deterministic) {
  const auto a = generate_phantom(small_options()), b = generate_phantom(small_options());
  EXPECT_TRUE(same_stacks(a.train_a, b.train_a));
  EXPECT_TRUE(same_stacks(a.train_b, b.train_b));
  EXPECT_TRUE(same_stacks(a.test_a, b.test_a));
  EXPECT_TRUE(same_stacks(a.test_b, b.test_b));
  EXPECT_FALSE(same_stacks(a.train_a, generate_phantom(small_options(4)).train_a));
}

TEST(Phantom, ShapesAndRange) {
  const auto d = generate_phantom(small_options());
  ASSERT_EQ(d.train_a.size(), 3u);
  ASSERT_EQ(d.test_b.size(), 2u);
  for (const auto* set : {&d.train_a, &d.train_b, &d.test_a, &d.test_b})
    for (const auto& s : *set) {
      ASSERT_EQ(s.slices.size(), 6u);
      EXPECT_TRUE(s.has_motion());
      for (const auto& img : s.slices) {
        EXPECT_EQ(img.height, 24);
        for (double v : img.pixels) {
          EXPECT_GE(v, 0.0);
          EXPECT_LE(v, 1.0);
        }
      }
    }
}

TEST(Phantom, TestPairsFollowIntensityTransform) {
  const auto d = generate_phantom(small_options());
  for (std::size_t i = 0; i < d.test_a.size(); ++i) {
    EXPECT_EQ(d.test_a[i].subject_id, d.test_b[i].subject_id);
    for (std::size_t k = 0; k < d.test_a[i].slices.size(); ++k) {
      const auto& a = d.test_a[i].slices[k];
      const auto& b = d.test_b[i].slices[k];
      for (std::size_t p = 0; p < a.size(); ++p) {
        EXPECT_EQ(b.pixels[p], std::pow(1.0 - a.pixels[p], 1.5));
      }
    }
  }
}

TEST(Phantom, IntensityTransformIsInvertibleAndDecreasing) {
  for (double a = 0.0; a <= 1.0; a += 0.05) {
    EXPECT_NEAR(domain_a_intensity(domain_b_intensity(a)), a, 1e-12);
    EXPECT_LT(domain_b_intensity(a + 0.01), domain_b_intensity(a));
  }
}

TEST(Phantom, TrainingSubjectsAreDisjoint) {
  const auto d = generate_phantom(small_options());
  std::set<std::string> a;
  for (const auto& s : d.train_a) a.insert(s.subject_id);
  for (const auto& s : d.train_b) EXPECT_EQ(a.count(s.subject_id), 0u) << s.subject_id;
  for (const auto& s : d.train_b) EXPECT_FALSE(s.paired);
  for (const auto& s : d.test_a) EXPECT_TRUE(s.paired);
}

TEST(Phantom, NeighbouringSlicesAreMoreSimilar) {
  PhantomOptions o;
  o.seed = 5;
  o.subjects = 4;
  const auto d = generate_phantom(o);
  for (int c = 0; c < 10; ++c) {
    const auto& s = d.train_a[static_cast<std::size_t>(c % 4)];
    const auto& other = d.train_a[static_cast<std::size_t>((c + 1) % 4)];
    const int t = c % 9;
    const double near = ssim(s.slices[t], s.slices[t + 1], 1.0);
    const double far = ssim(s.slices[t], other.slices[t], 1.0);
    EXPECT_GT(near, far) << "case " << c;
  }
}

TEST(Phantom, ConsecutiveMotionUnderTwoPixels) {
  const auto d = generate_phantom(PhantomOptions{});
  for (const auto& s : d.train_a)
    for (int t = 0; t + 1 < static_cast<int>(s.slices.size()); ++t) {
      const auto f = oracle_field(s, t, t + 1);
      for (std::size_t p = 0; p < f.dx.size(); ++p) {
        EXPECT_LT(std::hypot(f.dx.pixels[p], f.dy.pixels[p]), 2.0);
      }
    }
}

TEST(Phantom, OracleFieldAlignsSlices) {
  const auto d = generate_phantom(PhantomOptions{});
  const auto& s = d.train_a[0];
  const int n = 32;
  auto to_tensor = [n](const Image& img) { return TensorD({1, 1, n, n}, img.pixels); };
  for (int t = 1; t < 9; ++t) {
    const int k = t + 1;
    const auto f = oracle_field(s, t, k);
    std::vector<double> phi(f.dx.pixels);
    phi.insert(phi.end(), f.dy.pixels.begin(), f.dy.pixels.end());
    const auto warped = warp(to_tensor(s.slices[k]), TensorD({1, 2, n, n}, phi));
    double aligned = 0.0, raw = 0.0;
    for (int y = 3; y < n - 3; ++y)
      for (int x = 3; x < n - 3; ++x) {
        const auto i = static_cast<std::size_t>(y * n + x);
        aligned += std::abs(warped.data()[i] - s.slices[t].pixels[i]);
        raw += std::abs(s.slices[k].pixels[i] - s.slices[t].pixels[i]);
      }
    EXPECT_LT(aligned, 0.5 * raw) << "t " << t;
  }
}

TEST(Phantom, InvalidOptionsThrow) {
  auto o = small_options();
  o.size = 8;
  EXPECT_THROW(generate_phantom(o), std::invalid_argument);
  o = small_options();
  o.slices = 2;
  EXPECT_THROW(generate_phantom(o), std::invalid_argument);
}

TEST(Manifest, RoundTripPreservesOrder) {
  TempDir dir("manifest");
  const auto d = generate_phantom(small_options());
  write_manifest(d.test_a, dir.path());
  const auto loaded = load_stack(dir.path() / "manifest.json");
  ASSERT_EQ(loaded.size(), d.test_a.size());
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    EXPECT_EQ(loaded[i].subject_id, d.test_a[i].subject_id);
    ASSERT_EQ(loaded[i].slices.size(), d.test_a[i].slices.size());
    for (std::size_t k = 0; k < loaded[i].slices.size(); ++k)
      for (std::size_t p = 0; p < loaded[i].slices[k].size(); ++p)
        EXPECT_NEAR(loaded[i].slices[k].pixels[p], d.test_a[i].slices[k].pixels[p], 0.5 / 65535 + 1e-12);
    EXPECT_TRUE(loaded[i].has_motion());
    EXPECT_EQ(loaded[i].motion[2].shift_x, d.test_a[i].motion[2].shift_x);
  }
  // A directory holding manifest.json loads the same way.
  EXPECT_EQ(load_stack(dir.path()).size(), loaded.size());
}

TEST(Manifest, ThreeSlicesInListedOrder) {
  TempDir dir("manifest3");
  for (int i = 0; i < 3; ++i) write_png(dir.path() / ("s" + std::to_string(i) + ".png"), Image(4, 4, i / 2.0));
  std::ofstream(dir.path() / "manifest.json")
      << R"({"subjects":[{"id":"x","domain":"A","slices":["s2.png","s0.png","s1.png"]}]})";
  const auto stacks = load_stack(dir.path() / "manifest.json");
  ASSERT_EQ(stacks.size(), 1u);
  ASSERT_EQ(stacks[0].slices.size(), 3u);
  EXPECT_EQ(stacks[0].slices[0].pixels[0], 1.0);
  EXPECT_EQ(stacks[0].slices[1].pixels[0], 0.0);
  EXPECT_NEAR(stacks[0].slices[2].pixels[0], 0.5, 1.0 / 255);
}

TEST(Manifest, SixteenBitMaxIsOne) {
  TempDir dir("png16");
  write_png(dir.path() / "a.png", Image(3, 3, 1.0), 16);
  const auto p = read_png(dir.path() / "a.png");
  EXPECT_EQ(p.bit_depth, 16);
  EXPECT_EQ(p.image.pixels[0], 1.0);
}

TEST(Manifest, CorruptFileNamesPath) {
  TempDir dir("corrupt");
  write_png(dir.path() / "ok.png", Image(4, 4, 0.5));
  std::ofstream(dir.path() / "bad.png") << "not a png at all";
  std::ofstream(dir.path() / "manifest.json")
      << R"({"subjects":[{"id":"x","domain":"A","slices":["ok.png","bad.png","ok.png"]}]})";
  try {
    load_stack(dir.path());
    FAIL();
  } catch (const std::exception& e) {
    EXPECT_NE(std::string(e.what()).find("bad.png"), std::string::npos) << e.what();
  }
}

TEST(Manifest, InconsistentSizesThrow) {
  TempDir dir("sizes");
  write_png(dir.path() / "a.png", Image(4, 4, 0.5));
  write_png(dir.path() / "b.png", Image(5, 4, 0.5));
  std::ofstream(dir.path() / "manifest.json")
      << R"({"subjects":[{"id":"x","domain":"A","slices":["a.png","b.png","a.png"]}]})";
  try {
    load_stack(dir.path());
    FAIL();
  } catch (const std::exception& e) {
    EXPECT_NE(std::string(e.what()).find("b.png"), std::string::npos) << e.what();
  }
}

TEST(Preprocess, BinaryValuesMapToPlusMinusOne) {
  Image img(4, 4, 0.0);
  img.at(1, 2) = 1.0;
  const auto out = preprocess(img, 4);
  EXPECT_EQ(out.at(0, 0), -1.0);
  EXPECT_EQ(out.at(1, 2), 1.0);
}

TEST(Preprocess, ConstantStaysConstant) {
  const auto out = preprocess(Image(7, 5, 0.25), 16);
  EXPECT_EQ(out.height, 16);
  for (double v : out.pixels) EXPECT_NEAR(v, -0.5, 1e-15);
}

TEST(Preprocess, CheckerboardDownscale) {
  // Half-pixel centers: each 2x2 output pixel sits between four inputs.
  Image img(4, 4);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) img.at(y, x) = (x + y) % 2;
  const auto small = resize_bilinear(img, 2, 2);
  for (double v : small.pixels) EXPECT_NEAR(v, 0.5, 1e-15);
  for (double v : preprocess(img, 2).pixels) EXPECT_NEAR(v, 0.0, 1e-15);
}

TEST(Preprocess, OutputWithinRange) {
  auto img = testing::random_image(1, 9, 13, -0.5, 1.5);
  for (double v : preprocess(img, 32).pixels) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
}

SliceStack stack_of(int n, const std::string& id = "s") {
  SliceStack s;
  s.subject_id = id;
  for (int i = 0; i < n; ++i) s.slices.emplace_back(2, 2, i / 10.0);
  return s;
}

TEST(Triplets, ThreeSlicesOnlyCenterOne) {
  std::mt19937_64 rng(1);
  for (const auto& t : sample_triplets({stack_of(3)}, 20, rng)) {
    EXPECT_EQ(t.t, 1);
    EXPECT_EQ(t.prev.pixels[0], 0.0);
    EXPECT_EQ(t.next.pixels[0], 0.2);
  }
}

TEST(Triplets, CentersWithinBounds) {
  std::mt19937_64 rng(2);
  std::set<int> seen;
  for (const auto& t : sample_triplets({stack_of(10)}, 500, rng)) {
    EXPECT_GE(t.t, 1);
    EXPECT_LE(t.t, 8);
    EXPECT_DOUBLE_EQ(t.center.pixels[0], t.t / 10.0);
    seen.insert(t.t);
  }
  EXPECT_EQ(seen.size(), 8u);
}

TEST(Triplets, FixedSeedFixedSequence) {
  const std::vector<SliceStack> stacks{stack_of(6, "a"), stack_of(9, "b")};
  std::mt19937_64 r1(7), r2(7);
  const auto a = sample_triplets(stacks, 30, r1), b = sample_triplets(stacks, 30, r2);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].t, b[i].t);
    EXPECT_EQ(a[i].subject_id, b[i].subject_id);
  }
  EXPECT_EQ(count_centers(stacks), 4 + 7);
}

TEST(Triplets, ShortStackThrows) {
  std::mt19937_64 rng(1);
  EXPECT_THROW(sample_triplets({stack_of(2)}, 1, rng), std::invalid_argument);
}

TEST(Domain, ParseAndName) {
  EXPECT_EQ(parse_domain("A"), Domain::A);
  EXPECT_EQ(domain_name(Domain::B), "B");
  EXPECT_THROW(parse_domain("C"), std::invalid_argument);
}

}  // namespace
}  // namespace flowreg
