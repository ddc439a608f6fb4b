#include "flowreg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>
#include <stdexcept>

namespace flowreg {

namespace {

void require_same_shape(const Image& a, const Image& b, const char* what) {
  if (a.height != b.height || a.width != b.width) {
    throw std::invalid_argument(std::string(what) + ": image sizes differ (" +
                                std::to_string(a.height) + "x" + std::to_string(a.width) +
                                " vs " + std::to_string(b.height) + "x" +
                                std::to_string(b.width) + ")");
  }
}

// Valid-mode separable filtering with a symmetric kernel.
std::vector<double> filter_valid(const std::vector<double>& src, int h, int w,
                                 const std::vector<double>& k) {
  const int n = static_cast<int>(k.size());
  const int ho = h - n + 1, wo = w - n + 1;
  std::vector<double> rows(static_cast<std::size_t>(h) * wo, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < wo; ++x) {
      double s = 0.0;
      for (int i = 0; i < n; ++i) s += k[i] * src[static_cast<std::size_t>(y) * w + x + i];
      rows[static_cast<std::size_t>(y) * wo + x] = s;
    }
  std::vector<double> out(static_cast<std::size_t>(ho) * wo, 0.0);
  for (int y = 0; y < ho; ++y)
    for (int x = 0; x < wo; ++x) {
      double s = 0.0;
      for (int i = 0; i < n; ++i) s += k[i] * rows[static_cast<std::size_t>(y + i) * wo + x];
      out[static_cast<std::size_t>(y) * wo + x] = s;
    }
  return out;
}

}  // namespace

double mse(const Image& a, const Image& b) {
  require_same_shape(a, b, "mse");
  if (a.size() == 0) throw std::invalid_argument("mse: empty images");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.pixels[i] - b.pixels[i];
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

double psnr(double mse_value, double peak) {
  if (mse_value < 0.0 || std::isnan(mse_value)) {
    throw std::invalid_argument("psnr: mse must be >= 0, got " + std::to_string(mse_value));
  }
  if (mse_value == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse_value));
}

std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> k(static_cast<std::size_t>(size));
  const double c = (size - 1) / 2.0;
  double total = 0.0;
  for (int i = 0; i < size; ++i) {
    k[i] = std::exp(-(i - c) * (i - c) / (2.0 * sigma * sigma));
    total += k[i];
  }
  for (auto& v : k) v /= total;
  return k;
}

double ssim(const Image& a, const Image& b, double peak, const SsimOptions& options) {
  require_same_shape(a, b, "ssim");
  if (a.height < options.window || a.width < options.window) {
    throw std::invalid_argument("ssim: image " + std::to_string(a.height) + "x" +
                                std::to_string(a.width) + " is smaller than the " +
                                std::to_string(options.window) + "x" +
                                std::to_string(options.window) + " window");
  }
  const auto k = gaussian_window(options.window, options.sigma);
  const int h = a.height, w = a.width;
  std::vector<double> aa(a.size()), bb(a.size()), ab(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    aa[i] = a.pixels[i] * a.pixels[i];
    bb[i] = b.pixels[i] * b.pixels[i];
    ab[i] = a.pixels[i] * b.pixels[i];
  }
  const auto mu_a = filter_valid(a.pixels, h, w, k);
  const auto mu_b = filter_valid(b.pixels, h, w, k);
  const auto e_aa = filter_valid(aa, h, w, k);
  const auto e_bb = filter_valid(bb, h, w, k);
  const auto e_ab = filter_valid(ab, h, w, k);
  const double c1 = (options.k1 * peak) * (options.k1 * peak);
  const double c2 = (options.k2 * peak) * (options.k2 * peak);
  double total = 0.0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double ma = mu_a[i], mb = mu_b[i];
    const double va = e_aa[i] - ma * ma, vb = e_bb[i] - mb * mb, cov = e_ab[i] - ma * mb;
    total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) /
             ((ma * ma + mb * mb + c1) * (va + vb + c2));
  }
  return total / static_cast<double>(mu_a.size());
}

ImageMetrics compare_images(const std::string& name, const Image& pred, const Image& ref) {
  ImageMetrics m;
  m.name = name;
  m.mse = mse(pred, ref);
  m.psnr_db = psnr(m.mse);
  m.ssim = ssim(pred, ref);
  return m;
}

MetricReport aggregate(std::string direction, std::vector<ImageMetrics> images) {
  MetricReport r;
  r.direction = std::move(direction);
  r.images = std::move(images);
  if (r.images.empty()) return r;
  const double n = static_cast<double>(r.images.size());
  for (const auto& m : r.images) {
    r.mean_mse += m.mse;
    r.mean_psnr += m.psnr_db;
    r.mean_ssim += m.ssim;
  }
  r.mean_mse /= n;
  r.mean_psnr /= n;
  r.mean_ssim /= n;
  for (const auto& m : r.images) {
    r.std_mse += (m.mse - r.mean_mse) * (m.mse - r.mean_mse);
    r.std_psnr += (m.psnr_db - r.mean_psnr) * (m.psnr_db - r.mean_psnr);
    r.std_ssim += (m.ssim - r.mean_ssim) * (m.ssim - r.mean_ssim);
  }
  r.std_mse = std::sqrt(r.std_mse / n);
  r.std_psnr = std::sqrt(r.std_psnr / n);
  r.std_ssim = std::sqrt(r.std_ssim / n);
  return r;
}

std::string MetricReport::to_json() const {
  nlohmann::ordered_json j;
  j["direction"] = direction;
  j["count"] = images.size();
  j["mean"] = {{"mse", mean_mse}, {"psnr_db", mean_psnr}, {"ssim", mean_ssim}};
  j["std"] = {{"mse", std_mse}, {"psnr_db", std_psnr}, {"ssim", std_ssim}};
  auto& list = j["images"] = nlohmann::ordered_json::array();
  for (const auto& m : images) {
    list.push_back({{"name", m.name}, {"mse", m.mse}, {"psnr_db", m.psnr_db}, {"ssim", m.ssim}});
  }
  return j.dump(2);
}

std::vector<std::filesystem::path> list_png(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw std::runtime_error("not a directory: " + dir.string());
  }
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

namespace {

Image to_signed(Image img) {
  for (auto& v : img.pixels) v = 2.0 * v - 1.0;
  return img;
}

}  // namespace

MetricReport evaluate_set(const std::filesystem::path& pred_dir,
                          const std::filesystem::path& ref_dir, const std::string& direction) {
  const auto refs = list_png(ref_dir);
  const auto preds = list_png(pred_dir);
  if (refs.empty()) throw std::runtime_error("no PNG files in " + ref_dir.string());
  for (const auto& p : preds) {
    if (!std::filesystem::exists(ref_dir / p.filename())) {
      throw std::runtime_error("prediction has no reference counterpart: " + p.string());
    }
  }
  std::vector<ImageMetrics> images;
  for (const auto& ref : refs) {
    const auto pred = pred_dir / ref.filename();
    if (!std::filesystem::exists(pred)) {
      throw std::runtime_error("missing prediction for reference " + ref.string() + ": " +
                               pred.string());
    }
    images.push_back(compare_images(ref.filename().string(), to_signed(read_png(pred).image),
                                    to_signed(read_png(ref).image)));
  }
  return aggregate(direction, std::move(images));
}

Image montage(const std::vector<Image>& panels, double gap) {
  if (panels.empty()) throw std::invalid_argument("montage: no panels");
  int height = 0, width = 0;
  for (const auto& p : panels) {
    height = std::max(height, p.height);
    width += p.width;
  }
  width += static_cast<int>(panels.size()) - 1;
  Image out(height, width, gap);
  int x0 = 0;
  for (const auto& p : panels) {
    for (int y = 0; y < p.height; ++y)
      for (int x = 0; x < p.width; ++x) out.at(y, x0 + x) = p.at(y, x);
    x0 += p.width + 1;
  }
  return out;
}

}  // namespace flowreg
