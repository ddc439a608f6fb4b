#include "flowreg/check.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <nlohmann/json.hpp>
#include <random>

#include "flowreg/data.hpp"
#include "flowreg/flow.hpp"
#include "flowreg/grad_check.hpp"
#include "flowreg/metrics.hpp"
#include "flowreg/objectives.hpp"
#include "flowreg/ops.hpp"
#include "flowreg/optim.hpp"
#include "flowreg/trainer.hpp"
#include "flowreg/warp.hpp"

namespace flowreg {

namespace {

template <typename T>
Tensor<T> random_tensor(Shape shape, std::uint64_t seed, double stddev = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, stddev);
  std::vector<T> data(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& v : data) v = static_cast<T>(normal(rng));
  return Tensor<T>(std::move(shape), std::move(data));
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double m = 0.0;
  const auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < da.size(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(da[i]) - static_cast<double>(db[i])));
  }
  return m;
}

SuiteResult result(std::string name, double err, double tol, std::string detail,
                   bool pass_if_le = true) {
  SuiteResult r;
  r.name = std::move(name);
  r.max_error = err;
  r.tolerance = tol;
  r.passed = pass_if_le ? err <= tol : err < tol;
  r.detail = std::move(detail);
  return r;
}

FlowOptions small_flow(const char* name, std::uint64_t seed, int hidden = 16) {
  FlowOptions o;
  o.name = name;
  o.hidden_channels = hidden;
  o.seed = seed;
  return o;
}

template <typename T>
double cycle_error(std::uint64_t seed, bool fault) {
  FlowModel<T> gx(1, small_flow("gx", seed)), gy(1, small_flow("gy", seed));
  randomize_parameters(gx.parameters(), seed * 2 + 1, 0.05);
  randomize_parameters(gy.parameters(), seed * 2 + 2, 0.05);
  gx.inject_inverse_fault(fault);
  gy.inject_inverse_fault(fault);
  const auto x = random_tensor<T>({1, 1, 8, 8}, seed + 100);
  NoGradGuard no_grad;
  const auto back = translate(gy, gx, translate(gx, gy, x));
  return max_abs_diff(back, x);
}

SuiteResult check_f1(bool fault) {
  double err32 = 0.0, err64 = 0.0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    err32 = std::max(err32, cycle_error<float>(s, fault));
    err64 = std::max(err64, cycle_error<double>(s, fault));
  }
  auto r = result("F1", err32, 1e-4,
                  "20 random inputs, random weights; f64 max error " + std::to_string(err64));
  r.passed = r.passed && err64 <= 1e-10;
  return r;
}

// log|det| of the numerical Jacobian of the flow on a 1x1x4x4 input.
double numeric_logdet(const FlowModel<double>& m, const TensorD& x) {
  NoGradGuard no_grad;
  const int n = static_cast<int>(x.numel());
  Eigen::MatrixXd jac(n, n);
  const double eps = 1e-6;
  for (int j = 0; j < n; ++j) {
    auto plus = x.clone(), minus = x.clone();
    plus.data_mut()[static_cast<std::size_t>(j)] += eps;
    minus.data_mut()[static_cast<std::size_t>(j)] -= eps;
    const auto zp = m.forward(plus).z, zm = m.forward(minus).z;
    for (int i = 0; i < n; ++i) {
      const auto k = static_cast<std::size_t>(i);
      jac(i, j) = (zp.data()[k] - zm.data()[k]) / (2 * eps);
    }
  }
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(jac);
  double logdet = 0.0;
  const auto& u = lu.matrixLU();
  for (int i = 0; i < n; ++i) logdet += std::log(std::abs(u(i, i)));
  return logdet;
}

SuiteResult check_f2() {
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    FlowModel<double> m(1, small_flow("gx", s));
    randomize_parameters(m.parameters(), 1000 + s, 0.2);
    const auto x = random_tensor<double>({1, 1, 4, 4}, 2000 + s);
    NoGradGuard no_grad;
    const double analytic = m.forward(x).logdet.item();
    const double numeric = numeric_logdet(m, x);
    const double rel = std::abs(analytic - numeric) / std::max(std::abs(numeric), 1e-12);
    worst = std::isnan(rel) ? std::numeric_limits<double>::infinity() : std::max(worst, rel);
  }
  return result("F2", worst, 1e-6, "analytic vs numerical Jacobian log-determinant, 10 seeds");
}

SuiteResult check_f3() {
  const auto x = random_tensor<float>({2, 3, 8, 8}, 7);
  const auto z = random_tensor<float>({2, 12, 4, 4}, 8);
  const bool ok = max_abs_diff(depth_to_space(space_to_depth(x, 2), 2), x) == 0.0 &&
                  max_abs_diff(space_to_depth(depth_to_space(z, 2), 2), z) == 0.0;
  return result("F3", ok ? 0.0 : 1.0, 0.0, "squeeze/unsqueeze bitwise identity");
}

SuiteResult check_f4() {
  FlowModel<double> m(1, small_flow("gx", 3));
  const auto x = random_tensor<double>({4, 1, 8, 8}, 11, 0.5);
  m.data_init(x);
  Adam<double> opt("adam", m.parameters(), {1e-3});
  double prev = 0.0, worst_increase = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < 50; ++i) {
    opt.zero_grad();
    auto nll = mle_nll(m, x);
    const double v = nll.item();
    if (i > 0) worst_increase = std::max(worst_increase, v - prev);
    prev = v;
    nll.backward();
    opt.step();
  }
  return result("F4", worst_increase, 0.0, "largest NLL increase over 50 MLE steps", false);
}

SuiteResult check_t3() {
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    FlowModel<float> f(1, small_flow("gx", s));
    randomize_parameters(f.parameters(), 500 + s, 0.05);
    const auto x = random_tensor<float>({1, 1, 8, 8}, 600 + s);
    NoGradGuard no_grad;
    worst = std::max(worst, max_abs_diff(cycleflow_inverse(f, cycleflow_forward(f, x)), x));
  }
  return result("T3", worst, 1e-4, "single-model cycle consistency, 20 inputs");
}

SuiteResult check_w1() {
  const auto img = random_tensor<double>({2, 3, 9, 7}, 21);
  const auto out = warp(img, TensorD::zeros({2, 2, 9, 7}));
  bool same = true;
  for (std::size_t i = 0; i < img.data().size(); ++i) {
    same = same && std::memcmp(&img.data()[i], &out.data()[i], sizeof(double)) == 0;
  }
  return result("W1", same ? 0.0 : 1.0, 0.0, "zero field is bitwise identity");
}

SuiteResult check_w2() {
  const auto img = random_tensor<double>({1, 1, 10, 10}, 22);
  double worst = 0.0;
  for (auto [dx, dy] : {std::pair{1, 0}, std::pair{-2, 1}, std::pair{0, -1}, std::pair{2, 2}}) {
    std::vector<double> phi(200);
    for (int i = 0; i < 100; ++i) {
      phi[static_cast<std::size_t>(i)] = dx;
      phi[static_cast<std::size_t>(100 + i)] = dy;
    }
    const auto out = warp(img, TensorD({1, 2, 10, 10}, phi));
    for (int y = 0; y < 10; ++y)
      for (int x = 0; x < 10; ++x) {
        const int sy = y + dy, sx = x + dx;
        if (sy < 0 || sy >= 10 || sx < 0 || sx >= 10) continue;
        worst = std::max(worst, std::abs(out.data()[static_cast<std::size_t>(y * 10 + x)] -
                                         img.data()[static_cast<std::size_t>(sy * 10 + sx)]));
      }
  }
  return result("W2", worst, 0.0, "integer shifts vs array-shift oracle on interior pixels");
}

SuiteResult check_w3() {
  const auto u = random_tensor<double>({2, 2, 8, 8}, 23);
  const auto v = random_tensor<double>({2, 2, 8, 8}, 24);
  const auto phi = random_tensor<double>({2, 2, 8, 8}, 25, 1.5);
  const double a = 0.7, b = -1.3;
  const auto lhs = warp(u * a + v * b, phi);
  const auto rhs = warp(u, phi) * a + warp(v, phi) * b;
  return result("W3", max_abs_diff(lhs, rhs), 1e-6, "warp linear in the image for a fixed field");
}

SuiteResult check_w4() {
  RegNet<double> reg(1, {"reg", 2, 5});
  const auto params = reg.parameters();
  randomize_parameters(params, 26, 0.3);
  const auto xt = random_tensor<double>({1, 1, 8, 8}, 27);
  const auto xk = random_tensor<double>({1, 1, 8, 8}, 28);
  double worst = 0.0;
  for (const auto& p : params.entries()) {
    worst = std::max(worst, grad_check_leaf([&] { return registration_loss(xt, xk, reg, 1.0).loss; },
                                            p.tensor));
  }
  return result("W4", worst, 1e-4, "registration loss gradient w.r.t. registration parameters");
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.image_size = 32;
  c.network.flow_hidden = 8;
  c.network.disc_channels = 4;
  c.network.gen_channels = 4;
  c.network.reg_channels = 4;
  c.seed = 9;
  return c;
}

struct ObjectiveFixture {
  TrainConfig config = tiny_config();
  Models<double> models{config};
  TripletBatch<double> x, y;

  ObjectiveFixture() {
    PhantomOptions o;
    o.seed = 4;
    o.subjects = 1;
    o.test_subjects = 1;
    o.slices = 4;
    const auto data = generate_phantom(o);
    std::mt19937_64 rng(1);
    x = triplets_to_batch<double>(sample_triplets({preprocess(data.train_a[0], 32)}, 2, rng));
    y = triplets_to_batch<double>(sample_triplets({preprocess(data.train_b[0], 32)}, 2, rng));
    models.gx.data_init(x.center);
    models.gy.data_init(y.center);
    randomize_parameters(models.regnet_parameters(), 3, 0.05);
  }

  std::vector<LossReport> reports(const LossWeights& w) {
    const FlowPair<double> g{models.gx, models.gy};
    const DiscriminatorPair<double> d{models.dx, models.dy};
    const RegNetPair<double> r{models.reg_x, models.reg_y};
    return {alignflow_objective(x.center, y.center, g, d, w).report,
            flowreg_objective(x, y, g, d, r, w, 2).report,
            cyclegan_objective(x.center, y.center, models.g_xy, models.g_yx, d, w).report,
            cycleflow_objective(x.center, y.center, models.gx, d).report};
  }
};

SuiteResult check_o1(ObjectiveFixture& fx) {
  LossWeights w;
  w.lambda_x = 0.3;
  w.lambda_y = 0.02;
  w.lambda1 = 4.0;
  w.beta2 = 0.5;
  w.gamma1 = 2.5;
  w.lambda_cycle = 7.0;
  double worst = 0.0;
  for (const auto& r : fx.reports(w)) worst = std::max(worst, std::abs(r.total - r.weighted_sum()));
  return result("O1", worst, 1e-6, "objective totals vs weighted sums of reported parts");
}

SuiteResult check_o2(ObjectiveFixture& fx) {
  LossWeights w;
  w.lambda1 = w.lambda2 = w.beta1 = w.beta2 = w.gamma1 = w.gamma2 = 0.0;
  const FlowPair<double> g{fx.models.gx, fx.models.gy};
  const DiscriminatorPair<double> d{fx.models.dx, fx.models.dy};
  const auto a = alignflow_objective(fx.x.center, fx.y.center, g, d, w).report.total;
  const auto f =
      flowreg_objective(fx.x, fx.y, g, d, RegNetPair<double>{fx.models.reg_x, fx.models.reg_y}, w, 2)
          .report.total;
  return result("O2", a == f ? 0.0 : std::abs(a - f) + 1e-300, 0.0,
                "flowreg with zero extra weights vs alignflow total (bitwise)");
}

SuiteResult check_o3(ObjectiveFixture& fx) {
  double worst = 0.0;
  for (const auto& r : fx.reports(LossWeights{}))
    for (const auto& t : r.terms) worst = std::max(worst, -t.value);
  return result("O3", worst, 0.0, "most negative loss term");
}

SuiteResult check_o4() {
  const auto x = random_tensor<double>({2, 1, 8, 8}, 31);
  const auto zero = TensorD::zeros({2, 2, 8, 8});
  const double v = temporal_reg_loss<double>(x, {x, x}, {zero, zero}, 0).item();
  return result("O4", std::abs(v), 0.0, "temporal loss for identity map, equal slices, zero field");
}

Image random_image(std::uint64_t seed, int size = 24) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Image img(size, size);
  for (auto& v : img.pixels) v = u(rng);
  return img;
}

SuiteResult check_m1() {
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto a = random_image(s), b = random_image(s + 50);
    worst = std::max(worst, std::abs(ssim(a, b) - ssim(b, a)));
  }
  return result("M1", worst, 1e-9, "ssim symmetry");
}

SuiteResult check_m2() {
  double worst = 0.0;
  bool in_range = true;
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto a = random_image(s);
    auto neg = a;
    for (auto& v : neg.pixels) v = -v;
    worst = std::max(worst, std::abs(ssim(a, a) - 1.0));
    for (const auto& b : {random_image(s + 70), neg}) {
      const double v = ssim(a, b);
      in_range = in_range && v >= -1.0 && v <= 1.0 && v < 1.0 - 1e-6;
    }
  }
  auto r = result("M2", worst, 1e-6, "ssim(a, a) = 1, ssim(a, b) in [-1, 1) for a != b");
  r.passed = r.passed && in_range;
  return r;
}

SuiteResult check_m3() {
  double prev = psnr(1e-8), worst = -1e300;
  for (double m = 2e-8; m < 10.0; m *= 1.7) {
    const double v = psnr(m);
    worst = std::max(worst, v - prev);
    prev = v;
  }
  return result("M3", worst, 0.0, "largest psnr change for increasing mse (must be < 0)", false);
}

SuiteResult check_m4() {
  const double v = 10.0 * std::log10(4.0 / 0.0179);
  const double err = v < 23.35 ? 23.35 - v : (v > 23.65 ? v - 23.65 : 0.0);
  return result("M4", err, 0.0, "10 log10(4 / 0.0179) = " + std::to_string(v));
}

PhantomOptions small_phantom() {
  PhantomOptions o;
  o.seed = 17;
  o.subjects = 3;
  o.test_subjects = 1;
  o.slices = 4;
  o.size = 20;
  return o;
}

SuiteResult check_d1() {
  const auto d = generate_phantom(small_phantom());
  double worst = 0.0;
  for (const auto* set : {&d.train_a, &d.train_b, &d.test_a, &d.test_b})
    for (const auto& s : *set)
      for (const auto& img : s.slices)
        for (double v : preprocess(img, 32).pixels) worst = std::max(worst, std::abs(v) - 1.0);
  return result("D1", std::max(worst, 0.0), 0.0, "preprocessed values outside [-1, 1]");
}

SuiteResult check_d2() {
  const auto a = generate_phantom(small_phantom());
  const auto b = generate_phantom(small_phantom());
  bool same = true;
  auto cmp = [&](const std::vector<SliceStack>& x, const std::vector<SliceStack>& y) {
    same = same && x.size() == y.size();
    for (std::size_t i = 0; same && i < x.size(); ++i) {
      same = same && x[i].subject_id == y[i].subject_id && x[i].slices.size() == y[i].slices.size();
      for (std::size_t k = 0; same && k < x[i].slices.size(); ++k) {
        same = std::memcmp(x[i].slices[k].pixels.data(), y[i].slices[k].pixels.data(),
                           x[i].slices[k].size() * sizeof(double)) == 0;
      }
    }
  };
  cmp(a.train_a, b.train_a);
  cmp(a.train_b, b.train_b);
  cmp(a.test_a, b.test_a);
  cmp(a.test_b, b.test_b);
  return result("D2", same ? 0.0 : 1.0, 0.0, "phantom bitwise reproducible for a fixed seed");
}

SuiteResult check_d3() {
  const auto d = generate_phantom(small_phantom());
  int shared = 0;
  for (const auto& a : d.train_a)
    for (const auto& b : d.train_b) shared += a.subject_id == b.subject_id;
  return result("D3", shared, 0.0, "subjects shared between training domains");
}

using SuiteFn = std::function<SuiteResult()>;

std::vector<std::pair<std::string, SuiteFn>> registry(const CheckOptions& options) {
  auto fixture = std::make_shared<std::unique_ptr<ObjectiveFixture>>();
  auto fx = [fixture]() -> ObjectiveFixture& {
    if (!*fixture) *fixture = std::make_unique<ObjectiveFixture>();
    return **fixture;
  };
  return {
      {"F1", [&options] { return check_f1(options.inject_fault); }},
      {"F2", check_f2},
      {"F3", check_f3},
      {"F4", check_f4},
      {"W1", check_w1},
      {"W2", check_w2},
      {"W3", check_w3},
      {"W4", check_w4},
      {"O1", [fx] { return check_o1(fx()); }},
      {"O2", [fx] { return check_o2(fx()); }},
      {"O3", [fx] { return check_o3(fx()); }},
      {"O4", check_o4},
      {"M1", check_m1},
      {"M2", check_m2},
      {"M3", check_m3},
      {"M4", check_m4},
      {"D1", check_d1},
      {"D2", check_d2},
      {"D3", check_d3},
      {"T3", check_t3},
  };
}

}  // namespace

std::vector<std::string> check_suite_names() {
  std::vector<std::string> names;
  for (const auto& [name, _] : registry(CheckOptions{})) names.push_back(name);
  return names;
}

std::vector<SuiteResult> run_checks(const CheckOptions& options) {
  std::vector<SuiteResult> out;
  for (const auto& [name, fn] : registry(options)) {
    if (!options.suite.empty() && name != options.suite && name.rfind(options.suite, 0) != 0) {
      continue;
    }
    try {
      out.push_back(fn());
    } catch (const std::exception& e) {
      SuiteResult r;
      r.name = name;
      r.passed = false;
      r.max_error = std::numeric_limits<double>::infinity();
      r.detail = std::string("exception: ") + e.what();
      out.push_back(r);
    }
  }
  if (out.empty()) throw std::invalid_argument("no check suite matches '" + options.suite + "'");
  return out;
}

std::string check_report_json(const std::vector<SuiteResult>& results) {
  nlohmann::ordered_json j;
  bool all = true;
  auto& suites = j["suites"] = nlohmann::ordered_json::array();
  for (const auto& r : results) {
    all = all && r.passed;
    nlohmann::ordered_json s;
    s["name"] = r.name;
    s["passed"] = r.passed;
    s["max_error"] = std::isfinite(r.max_error) ? nlohmann::ordered_json(r.max_error)
                                                : nlohmann::ordered_json("inf");
    s["tolerance"] = r.tolerance;
    s["detail"] = r.detail;
    suites.push_back(std::move(s));
  }
  j["passed"] = all;
  return j.dump(2);
}

}  // namespace flowreg
