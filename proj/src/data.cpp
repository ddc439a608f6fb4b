#include "flowreg/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <stdexcept>

#include "flowreg/nn.hpp"

namespace flowreg {

namespace fs = std::filesystem;

std::string domain_name(Domain d) { return d == Domain::A ? "A" : "B"; }

Domain parse_domain(const std::string& s) {
  if (s == "A") return Domain::A;
  if (s == "B") return Domain::B;
  throw std::invalid_argument("unknown domain '" + s + "' (expected A or B)");
}

DisplacementField oracle_field(const SliceStack& stack, int t, int k, double resample) {
  if (!stack.has_motion()) {
    throw std::invalid_argument("stack " + stack.subject_id + " has no recorded motion");
  }
  const int n = static_cast<int>(stack.slices.size());
  if (t < 0 || t >= n || k < 0 || k >= n) {
    throw std::out_of_range("oracle_field: slice index out of range for " + stack.subject_id);
  }
  const auto& mt = stack.motion[static_cast<std::size_t>(t)];
  const auto& mk = stack.motion[static_cast<std::size_t>(k)];
  const int h = static_cast<int>(std::lround(stack.slices[0].height * resample));
  const int w = static_cast<int>(std::lround(stack.slices[0].width * resample));
  DisplacementField f{Image(h, w), Image(h, w)};
  const double ratio = mk.scale / mt.scale;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      // Position on the native grid, then the displacement scaled back.
      const double px = (x + 0.5) / resample - 0.5;
      const double py = (y + 0.5) / resample - 0.5;
      const double qx = stack.center_x + mk.shift_x +
                        ratio * (px - stack.center_x - mt.shift_x);
      const double qy = stack.center_y + mk.shift_y +
                        ratio * (py - stack.center_y - mt.shift_y);
      f.dx.at(y, x) = (qx - px) * resample;
      f.dy.at(y, x) = (qy - py) * resample;
    }
  return f;
}

double domain_b_intensity(double a) {
  return std::pow(1.0 - std::clamp(a, 0.0, 1.0), 1.5);
}

double domain_a_intensity(double b) {
  return 1.0 - std::pow(std::clamp(b, 0.0, 1.0), 1.0 / 1.5);
}

Image to_domain_b(const Image& a) {
  Image b = a;
  for (auto& v : b.pixels) v = domain_b_intensity(v);
  return b;
}

namespace {

struct Ellipse {
  double cx, cy, ax, ay, theta, value;
};

struct Anatomy {
  std::vector<Ellipse> layers;  // painted in order
};

Anatomy random_anatomy(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  auto jitter = [&](double base, double amount) { return base + amount * u(rng); };
  Anatomy a;
  const double hx = jitter(0.0, 0.04), hy = jitter(0.0, 0.04);
  const double rx = jitter(0.74, 0.05), ry = jitter(0.86, 0.05);
  const double rot = jitter(0.0, 0.15);
  a.layers.push_back({hx, hy, rx, ry, rot, 0.35});
  a.layers.push_back({hx, hy, rx * 0.92, ry * 0.93, rot, 0.92});
  a.layers.push_back({hx, hy, rx * 0.84, ry * 0.86, rot, 0.18});
  a.layers.push_back({hx, hy, rx * 0.79, ry * 0.81, rot, 0.58});
  for (int side = -1; side <= 1; side += 2) {
    a.layers.push_back({hx + side * jitter(0.27, 0.05) * rx, hy + jitter(-0.05, 0.08),
                        jitter(0.22, 0.04) * rx, jitter(0.42, 0.06) * ry, rot + side * 0.2,
                        jitter(0.8, 0.05)});
  }
  for (int side = -1; side <= 1; side += 2) {
    a.layers.push_back({hx + side * jitter(0.08, 0.02), hy + jitter(-0.05, 0.05),
                        jitter(0.06, 0.015), jitter(0.22, 0.05), rot + side * jitter(0.3, 0.1),
                        0.08});
  }
  std::uniform_int_distribution<int> blob_count(2, 4);
  const int blobs = blob_count(rng);
  for (int i = 0; i < blobs; ++i) {
    const double r = std::sqrt(std::abs(u(rng))) * 0.5;
    const double ang = 3.14159265358979 * u(rng);
    a.layers.push_back({hx + r * rx * std::cos(ang), hy + r * ry * std::sin(ang),
                        0.05 + 0.1 * std::abs(u(rng)), 0.05 + 0.1 * std::abs(u(rng)),
                        3.0 * u(rng), 0.45 + 0.45 * std::abs(u(rng))});
  }
  return a;
}

// Paints the anatomy for one slice; edges are smoothed over about one pixel.
Image render(const Anatomy& anatomy, int size, const SliceMotion& m, double c) {
  Image img(size, size, 0.0);
  const double half = size / 2.0;
  constexpr double edge_px = 0.7;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      // Anatomy coordinate seen by this pixel.
      const double qx = c + (x - c - m.shift_x) / m.scale;
      const double qy = c + (y - c - m.shift_y) / m.scale;
      const double ux = (qx - c) / half, uy = (qy - c) / half;
      double v = 0.0;
      for (const auto& e : anatomy.layers) {
        const double dx = ux - e.cx, dy = uy - e.cy;
        const double ct = std::cos(e.theta), st = std::sin(e.theta);
        const double ex = (ct * dx + st * dy) / e.ax, ey = (-st * dx + ct * dy) / e.ay;
        const double r = std::sqrt(ex * ex + ey * ey);
        const double radius_px = 0.5 * (e.ax + e.ay) * half * m.scale;
        const double mask = 0.5 * (1.0 + std::tanh((1.0 - r) * radius_px / edge_px));
        v = v * (1.0 - mask) + e.value * mask;
      }
      img.at(y, x) = std::clamp(v, 0.0, 1.0);
    }
  return img;
}

std::vector<SliceMotion> random_motion(std::mt19937_64& rng, int slices, int size) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  // Per-step bounds keep consecutive-slice displacement under 2 px anywhere
  // in the image: 0.8 * sqrt(2) + scale_step * size / sqrt(2) < 1.6.
  const double shift_step = 0.8;
  const double scale_step = 0.6 / size;
  std::vector<SliceMotion> motion(static_cast<std::size_t>(slices));
  motion[0] = {1.0 + 0.02 * u(rng), 0.5 * u(rng), 0.5 * u(rng)};
  for (int i = 1; i < slices; ++i) {
    const auto& p = motion[static_cast<std::size_t>(i - 1)];
    auto& m = motion[static_cast<std::size_t>(i)];
    m.scale = std::clamp(p.scale + scale_step * u(rng), 0.94, 1.06);
    m.shift_x = std::clamp(p.shift_x + shift_step * u(rng), -3.0, 3.0);
    m.shift_y = std::clamp(p.shift_y + shift_step * u(rng), -3.0, 3.0);
  }
  return motion;
}

SliceStack make_subject(std::uint64_t seed, int index, const PhantomOptions& o, bool paired) {
  std::mt19937_64 rng(derive_seed(seed, "subject" + std::to_string(index)));
  const auto anatomy = random_anatomy(rng);
  SliceStack s;
  char id[16];
  std::snprintf(id, sizeof id, "s%03d", index);
  s.subject_id = id;
  s.domain = Domain::A;
  s.paired = paired;
  s.center_x = s.center_y = (o.size - 1) / 2.0;
  s.motion = random_motion(rng, o.slices, o.size);
  for (const auto& m : s.motion) s.slices.push_back(render(anatomy, o.size, m, s.center_x));
  return s;
}

SliceStack as_domain_b(SliceStack s) {
  s.domain = Domain::B;
  for (auto& img : s.slices) img = to_domain_b(img);
  return s;
}

}  // namespace

PhantomDataset generate_phantom(const PhantomOptions& o) {
  if (o.size < 16) throw std::invalid_argument("phantom size must be >= 16, got " + std::to_string(o.size));
  if (o.slices < 3) throw std::invalid_argument("phantom needs >= 3 slices per subject, got " + std::to_string(o.slices));
  if (o.subjects < 1 || o.test_subjects < 1) {
    throw std::invalid_argument("phantom needs at least one training and one test subject");
  }
  PhantomDataset d;
  int index = 0;
  for (int i = 0; i < o.subjects; ++i) d.train_a.push_back(make_subject(o.seed, index++, o, false));
  for (int i = 0; i < o.subjects; ++i) {
    d.train_b.push_back(as_domain_b(make_subject(o.seed, index++, o, false)));
  }
  for (int i = 0; i < o.test_subjects; ++i) {
    auto a = make_subject(o.seed, index++, o, true);
    d.test_b.push_back(as_domain_b(a));
    d.test_a.push_back(std::move(a));
  }
  return d;
}

void write_manifest(const std::vector<SliceStack>& stacks, const fs::path& dir, int bit_depth) {
  fs::create_directories(dir);
  nlohmann::ordered_json subjects = nlohmann::ordered_json::array();
  for (const auto& s : stacks) {
    nlohmann::ordered_json entry;
    entry["id"] = s.subject_id;
    entry["domain"] = domain_name(s.domain);
    entry["paired"] = s.paired;
    auto& files = entry["slices"] = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < s.slices.size(); ++i) {
      char name[64];
      std::snprintf(name, sizeof name, "%s_%02zu.png", s.subject_id.c_str(), i);
      write_png(dir / name, s.slices[i], bit_depth);
      files.push_back(name);
    }
    if (s.has_motion()) {
      entry["center"] = {s.center_x, s.center_y};
      auto& motion = entry["motion"] = nlohmann::ordered_json::array();
      for (const auto& m : s.motion) motion.push_back({m.scale, m.shift_x, m.shift_y});
    }
    subjects.push_back(std::move(entry));
  }
  std::ofstream out(dir / "manifest.json");
  if (!out) throw std::runtime_error("cannot write manifest in " + dir.string());
  out << nlohmann::ordered_json{{"subjects", subjects}}.dump(2) << "\n";
}

void write_phantom(const PhantomDataset& d, const fs::path& dir) {
  write_manifest(d.train_a, dir / "trainA");
  write_manifest(d.train_b, dir / "trainB");
  write_manifest(d.test_a, dir / "testA");
  write_manifest(d.test_b, dir / "testB");
}

std::vector<SliceStack> load_stack(const fs::path& path) {
  const auto manifest_path = fs::is_directory(path) ? path / "manifest.json" : path;
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("cannot open manifest " + manifest_path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("invalid manifest " + manifest_path.string() + ": " + e.what());
  }
  const auto root = manifest_path.parent_path();
  if (!j.contains("subjects") || !j["subjects"].is_array()) {
    throw std::runtime_error("manifest " + manifest_path.string() + " has no subjects array");
  }
  std::vector<SliceStack> stacks;
  for (const auto& entry : j["subjects"]) {
    SliceStack s;
    try {
      s.subject_id = entry.at("id").get<std::string>();
      s.domain = parse_domain(entry.at("domain").get<std::string>());
      s.paired = entry.value("paired", false);
      for (const auto& name : entry.at("slices")) {
        const auto path = root / name.get<std::string>();
        if (!fs::exists(path)) throw std::runtime_error("missing slice file " + path.string());
        auto img = read_png(path).image;
        if (!s.slices.empty() &&
            (img.height != s.slices[0].height || img.width != s.slices[0].width)) {
          throw std::runtime_error("slice " + path.string() + " is " + std::to_string(img.height) +
                                   "x" + std::to_string(img.width) + ", expected " +
                                   std::to_string(s.slices[0].height) + "x" +
                                   std::to_string(s.slices[0].width));
        }
        s.slices.push_back(std::move(img));
      }
      if (entry.contains("motion")) {
        const auto& c = entry.at("center");
        s.center_x = c.at(0).get<double>();
        s.center_y = c.at(1).get<double>();
        for (const auto& m : entry.at("motion")) {
          s.motion.push_back({m.at(0).get<double>(), m.at(1).get<double>(), m.at(2).get<double>()});
        }
      }
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("malformed subject entry in " + manifest_path.string() + ": " +
                               e.what());
    }
    stacks.push_back(std::move(s));
  }
  return stacks;
}

Image resize_bilinear(const Image& img, int height, int width) {
  if (height < 1 || width < 1) throw std::invalid_argument("resize: target size must be positive");
  if (img.height == height && img.width == width) return img;
  Image out(height, width);
  const double sy = static_cast<double>(img.height) / height;
  const double sx = static_cast<double>(img.width) / width;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, img.height - 1.0);
    const int y0 = static_cast<int>(std::floor(fy));
    const int y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, img.width - 1.0);
      const int x0 = static_cast<int>(std::floor(fx));
      const int x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - x0;
      const double top = (1.0 - wx) * img.at(y0, x0) + wx * img.at(y0, x1);
      const double bottom = (1.0 - wx) * img.at(y1, x0) + wx * img.at(y1, x1);
      out.at(y, x) = (1.0 - wy) * top + wy * bottom;
    }
  }
  return out;
}

Image preprocess(const Image& img, int target_size) {
  Image out = resize_bilinear(img, target_size, target_size);
  for (auto& v : out.pixels) v = std::clamp(2.0 * v - 1.0, -1.0, 1.0);
  return out;
}

SliceStack preprocess(const SliceStack& stack, int target_size) {
  SliceStack out = stack;
  for (auto& img : out.slices) img = preprocess(img, target_size);
  if (!stack.slices.empty() && stack.has_motion() && stack.slices[0].width != target_size) {
    const double f = static_cast<double>(target_size) / stack.slices[0].width;
    out.center_x = (stack.center_x + 0.5) * f - 0.5;
    out.center_y = (stack.center_y + 0.5) * f - 0.5;
    for (auto& m : out.motion) {
      m.shift_x *= f;
      m.shift_y *= f;
    }
  }
  return out;
}

std::int64_t count_centers(const std::vector<SliceStack>& stacks) {
  std::int64_t n = 0;
  for (const auto& s : stacks) n += std::max<std::int64_t>(0, static_cast<std::int64_t>(s.slices.size()) - 2);
  return n;
}

std::vector<SliceTriplet> sample_triplets(const std::vector<SliceStack>& stacks, int batch,
                                          std::mt19937_64& rng) {
  if (stacks.empty()) throw std::invalid_argument("sample_triplets: no stacks");
  if (batch < 1) throw std::invalid_argument("sample_triplets: batch must be >= 1");
  for (const auto& s : stacks) {
    if (s.slices.size() < 3) {
      throw std::invalid_argument("stack " + s.subject_id + " has " +
                                  std::to_string(s.slices.size()) +
                                  " slices; triplets need at least 3");
    }
  }
  std::vector<SliceTriplet> out;
  out.reserve(static_cast<std::size_t>(batch));
  for (int i = 0; i < batch; ++i) {
    std::uniform_int_distribution<std::size_t> pick_stack(0, stacks.size() - 1);
    const auto si = pick_stack(rng);
    const auto& s = stacks[si];
    std::uniform_int_distribution<int> pick_t(1, static_cast<int>(s.slices.size()) - 2);
    const int t = pick_t(rng);
    out.push_back({s.slices[static_cast<std::size_t>(t - 1)], s.slices[static_cast<std::size_t>(t)],
                   s.slices[static_cast<std::size_t>(t + 1)], s.subject_id, t,
                   static_cast<int>(si)});
  }
  return out;
}

}  // namespace flowreg
