#pragma once

// Image similarity metrics on the [-1, 1] intensity scale (peak 2).

#include <filesystem>
#include <string>
#include <vector>

#include "flowreg/image_io.hpp"

namespace flowreg {

inline constexpr double kDefaultPeak = 2.0;
// PSNR reported for identical images.
inline constexpr double kPsnrCap = 99.0;

double mse(const Image& a, const Image& b);

// 10 log10(peak^2 / mse); kPsnrCap for mse == 0. Throws on negative mse.
double psnr(double mse, double peak = kDefaultPeak);

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
};

// Mean SSIM over all fully contained Gaussian windows.
double ssim(const Image& a, const Image& b, double peak = kDefaultPeak,
            const SsimOptions& options = {});

// Normalized 1-D Gaussian weights of the SSIM window.
std::vector<double> gaussian_window(int size, double sigma);

struct ImageMetrics {
  std::string name;
  double mse = 0.0;
  double psnr_db = 0.0;
  double ssim = 0.0;
};

struct MetricReport {
  std::string direction;
  std::vector<ImageMetrics> images;
  double mean_mse = 0.0, mean_psnr = 0.0, mean_ssim = 0.0;
  double std_mse = 0.0, std_psnr = 0.0, std_ssim = 0.0;

  std::string to_json() const;
};

// Means and population standard deviations of per-image entries.
MetricReport aggregate(std::string direction, std::vector<ImageMetrics> images);

ImageMetrics compare_images(const std::string& name, const Image& pred, const Image& ref);

// Pairs every PNG in ref_dir with the same file name in pred_dir (sorted by
// name), maps both from [0, 1] to [-1, 1], and reports per-image metrics.
MetricReport evaluate_set(const std::filesystem::path& pred_dir,
                          const std::filesystem::path& ref_dir, const std::string& direction = "");

// Sorted list of *.png files in a directory.
std::vector<std::filesystem::path> list_png(const std::filesystem::path& dir);

// Side-by-side panels separated by a one-pixel gap of value `gap`.
Image montage(const std::vector<Image>& panels, double gap = 0.0);

}  // namespace flowreg
