#pragma once

// Slice stacks, the synthetic two-domain phantom, manifest loading,
// preprocessing and triplet sampling.

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "flowreg/image_io.hpp"

namespace flowreg {

enum class Domain { A, B };

std::string domain_name(Domain d);
Domain parse_domain(const std::string& s);

// In-plane pose of one slice: the anatomy is scaled by `scale` about the
// stack center and then shifted by (shift_x, shift_y) pixels.
struct SliceMotion {
  double scale = 1.0;
  double shift_x = 0.0;
  double shift_y = 0.0;
};

struct SliceStack {
  std::string subject_id;
  Domain domain = Domain::A;
  std::vector<Image> slices;  // anatomical order
  bool paired = false;
  // Known per-slice motion (phantom data only; empty otherwise).
  std::vector<SliceMotion> motion;
  double center_x = 0.0, center_y = 0.0;

  bool has_motion() const { return !slices.empty() && motion.size() == slices.size(); }
};

struct SliceTriplet {
  Image prev, center, next;
  std::string subject_id;
  int t = 0;
  int stack_index = 0;
};

// Displacement field (pixels) that moves slice k onto slice t:
// slice_k(p + phi(p)) = slice_t(p). Derived from the recorded motion.
// `resample` converts to a grid resized by that factor with half-pixel centers.
struct DisplacementField {
  Image dx, dy;
};
DisplacementField oracle_field(const SliceStack& stack, int t, int k, double resample = 1.0);

struct PhantomOptions {
  std::uint64_t seed = 1;
  int subjects = 8;       // training subjects per domain
  int test_subjects = 2;  // paired test subjects
  int slices = 10;
  int size = 32;
};

struct PhantomDataset {
  std::vector<SliceStack> train_a, train_b;
  // Same subjects rendered in both domains: test_b[i] is the domain-B image
  // of test_a[i], slice for slice.
  std::vector<SliceStack> test_a, test_b;
};

// Contrast inversion followed by gamma 1.5, on the [0, 1] scale.
double domain_b_intensity(double a);
double domain_a_intensity(double b);
Image to_domain_b(const Image& a);

PhantomDataset generate_phantom(const PhantomOptions& options);

// Writes <dir>/<split>/manifest.json plus 16-bit PNG slices for each split
// (trainA, trainB, testA, testB).
void write_phantom(const PhantomDataset& data, const std::filesystem::path& dir);

void write_manifest(const std::vector<SliceStack>& stacks, const std::filesystem::path& dir,
                    int bit_depth = 16);

// Loads every subject listed in a manifest (or a directory holding
// manifest.json), with pixel values in [0, 1].
std::vector<SliceStack> load_stack(const std::filesystem::path& path);

// Bilinear resize (half-pixel centers).
Image resize_bilinear(const Image& img, int height, int width);

// Resize to target x target, then map [0, 1] -> [-1, 1] and clamp.
Image preprocess(const Image& img, int target_size);
SliceStack preprocess(const SliceStack& stack, int target_size);

// Picks `batch` triplets: a stack uniformly, then a center t uniformly in
// [1, len - 2].
std::vector<SliceTriplet> sample_triplets(const std::vector<SliceStack>& stacks, int batch,
                                          std::mt19937_64& rng);

// Number of valid triplet centers across all stacks.
std::int64_t count_centers(const std::vector<SliceStack>& stacks);

}  // namespace flowreg
