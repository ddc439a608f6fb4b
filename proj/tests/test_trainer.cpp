#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>

#include "flowreg/check.hpp"
#include "flowreg/commands.hpp"
#include "flowreg/trainer.hpp"
#include "test_util.hpp"

namespace flowreg {
namespace {

using testing::TempDir;

TrainConfig tiny(Mode mode) {
  TrainConfig c;
  c.mode = mode;
  c.network.flow_hidden = 8;
  c.network.disc_channels = 4;
  c.network.gen_channels = 4;
  c.network.reg_channels = 4;
  c.seed = 21;
  c.epochs = 1;
  return c;
}

PhantomDataset tiny_phantom() {
  PhantomOptions o;
  o.seed = 2;
  o.subjects = 2;
  o.test_subjects = 1;
  o.slices = 4;
  return generate_phantom(o);
}

template <typename T>
std::vector<double> snapshot(const ParameterRegistry<T>& r) {
  std::vector<double> v;
  for (const auto& p : r.entries()) v.insert(v.end(), p.tensor.data().begin(), p.tensor.data().end());
  return v;
}

TEST(Adam, FirstStepMovesByLearningRate) {
  std::vector<double> p{1.0, -2.0}, g{1.0, -3.0}, m(2, 0.0), v(2, 0.0);
  adam_update<double>(p, g, m, v, 1, {});
  EXPECT_NEAR(p[0], 1.0 - 2e-4, 1e-11);
  EXPECT_NEAR(p[1], -2.0 + 2e-4, 1e-11);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  std::vector<double> p{0.5}, g{0.0}, m(1, 0.0), v(1, 0.0);
  for (int s = 1; s <= 3; ++s) adam_update<double>(p, g, m, v, s, {});
  EXPECT_EQ(p[0], 0.5);
}

TEST(Adam, SecondStepMatchesFormula) {
  std::vector<double> p{0.0}, m(1, 0.0), v(1, 0.0);
  adam_update<double>(p, std::vector<double>{1.0}, m, v, 1, {});
  adam_update<double>(p, std::vector<double>{0.5}, m, v, 2, {});
  const double m2 = 0.9 * 0.1 + 0.1 * 0.5, v2 = 0.999 * 0.001 + 0.001 * 0.25;
  const double mh = m2 / (1 - 0.81), vh = v2 / (1 - 0.999 * 0.999);
  EXPECT_NEAR(p[0], -2e-4 - 2e-4 * mh / (std::sqrt(vh) + 1e-8), 1e-11);
}

TEST(Adam, GroupsAreIndependent) {
  ParameterRegistry<double> a, b;
  a.add("a.w", TensorD({2}, {1.0, 1.0}, true));
  b.add("b.w", TensorD({1}, {1.0}, true));
  Adam<double> oa("oa", a), ob("ob", b);
  auto ta = a.entries()[0].tensor, tb = b.entries()[0].tensor;  // handles share storage
  ta.grad_mut()[0] = 1.0;
  tb.grad_mut()[0] = 1.0;
  oa.step();
  EXPECT_EQ(b.entries()[0].tensor.data()[0], 1.0);
  EXPECT_LT(a.entries()[0].tensor.data()[0], 1.0);
  EXPECT_EQ(oa.step_count(), 1);
  EXPECT_EQ(ob.step_count(), 0);
}

TEST(Schedule, StepDecay) {
  EXPECT_DOUBLE_EQ(lr_at(0, 2e-4), 2e-4);
  EXPECT_DOUBLE_EQ(lr_at(19, 2e-4), 2e-4);
  EXPECT_NEAR(lr_at(20, 2e-4), 2e-5, 1e-20);
  EXPECT_NEAR(lr_at(45, 2e-4), 2e-6, 1e-20);
}

Checkpoint sample_checkpoint() {
  Checkpoint ck;
  ck.add_tensor("a.weight", TensorF({2, 3}, {1, 2, 3, 4, 5, 6.5f}));
  ck.add_tensor("b.bias", TensorD({2}, {0.1, -0.2}));
  ck.add_scalar("meta.x", 7.0);
  return ck;
}

CheckpointErrorKind kind_of(const std::vector<std::uint8_t>& bytes) {
  try {
    Checkpoint::from_bytes(bytes);
  } catch (const CheckpointError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error";
  return CheckpointErrorKind::io;
}

TEST(CheckpointFile, ResaveIsByteIdentical) {
  TempDir dir("ck");
  const auto p1 = dir.path() / "a.flwr", p2 = dir.path() / "b.flwr";
  sample_checkpoint().save(p1);
  const auto loaded = Checkpoint::load(p1);
  loaded.save(p2);
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  const std::string s1((std::istreambuf_iterator<char>(f1)), {}), s2((std::istreambuf_iterator<char>(f2)), {});
  EXPECT_EQ(s1, s2);
  EXPECT_EQ(loaded.at("a.weight").values[5], 6.5);
  EXPECT_EQ(loaded.scalar("meta.x"), 7.0);
  EXPECT_EQ(loaded.at("a.weight").dtype, DType::f32);
}

TEST(CheckpointFile, DistinctErrorKinds) {
  const auto good = sample_checkpoint().to_bytes();
  auto flipped = good;
  flipped[good.size() / 2] ^= 0x10;
  EXPECT_EQ(kind_of(flipped), CheckpointErrorKind::crc_mismatch);
  auto payload = good;
  payload[good.size() - 6] ^= 0x01;  // inside the last stored value
  EXPECT_EQ(kind_of(payload), CheckpointErrorKind::crc_mismatch);
  auto version = good;
  version[4] = 9;
  EXPECT_EQ(kind_of(version), CheckpointErrorKind::unsupported_version);
  auto magic = good;
  magic[0] = 'X';
  EXPECT_EQ(kind_of(magic), CheckpointErrorKind::bad_magic);
  EXPECT_EQ(kind_of({good.begin(), good.begin() + static_cast<std::ptrdiff_t>(good.size() - 9)}),
            CheckpointErrorKind::truncated);
  EXPECT_EQ(kind_of({good.begin(), good.begin() + 6}), CheckpointErrorKind::truncated);
  try {
    Checkpoint::load("/nonexistent/dir/x.flwr");
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.kind(), CheckpointErrorKind::io);
  }
}

TEST(CheckpointFile, LoadIntoChecksShape) {
  const auto ck = sample_checkpoint();
  auto ok = TensorF::zeros({2, 3});
  ck.load_into("a.weight", ok);
  EXPECT_EQ(ok.data()[5], 6.5f);
  auto wrong = TensorF::zeros({3, 2});
  EXPECT_THROW(ck.load_into("a.weight", wrong), CheckpointError);
}

TEST(Config, ParseAndRejectUnknownKeys) {
  const auto c = parse_config(R"({"mode":"alignflow","epochs":3,"weights":{"lambda1":2.5},
                                   "network":{"flow_hidden":16},"data":{"train_a":"a","train_b":"b"}})",
                              "/base");
  EXPECT_EQ(c.mode, Mode::alignflow);
  EXPECT_EQ(c.epochs, 3);
  EXPECT_EQ(c.weights.lambda1, 2.5);
  EXPECT_EQ(c.network.flow_hidden, 16);
  EXPECT_EQ(c.train_a, std::filesystem::path("/base/a"));
  try {
    parse_config(R"({"weights":{"lamda1":1}})");
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("lamda1"), std::string::npos);
  }
  EXPECT_THROW(parse_config(R"({"epoch":1})"), std::invalid_argument);
  EXPECT_THROW(parse_config(R"({"mode":"gan"})"), std::invalid_argument);
  EXPECT_THROW(parse_config(R"({"batch":0})"), std::invalid_argument);
  EXPECT_THROW(parse_config(R"({"weights":{"beta1":-1}})"), std::invalid_argument);
}

TEST(Config, JsonRoundTrip) {
  auto c = tiny(Mode::cyclegan);
  c.weights.gamma2 = 0.25;
  const auto back = parse_config(config_to_json(c));
  EXPECT_EQ(back.mode, Mode::cyclegan);
  EXPECT_EQ(back.weights.gamma2, 0.25);
  EXPECT_EQ(back.network.disc_channels, 4);
  EXPECT_EQ(back.seed, 21u);
}

TEST(Trainer, UpdatesTouchOnlyTheirOwnNetworks) {
  // Discriminator step leaves generators untouched and the generator step
  // leaves discriminators untouched.
  const auto cfg = tiny(Mode::flowreg);
  Models<float> m(cfg);
  randomize_parameters(m.all_parameters(), 3, 0.05);
  const auto gp = m.generator_parameters(cfg.mode), dp = m.discriminator_parameters(), rp = m.regnet_parameters();
  Adam<float> og("g", gp), od("d", dp), oreg("r", rp);
  const auto data = tiny_phantom();
  std::mt19937_64 rng(1);
  std::vector<SliceStack> a, b;
  for (const auto& s : data.train_a) a.push_back(preprocess(s, 32));
  for (const auto& s : data.train_b) b.push_back(preprocess(s, 32));
  const auto x = triplets_to_batch<float>(sample_triplets(a, 2, rng));
  const auto y = triplets_to_batch<float>(sample_triplets(b, 2, rng));

  const auto g0 = snapshot(gp), r0 = snapshot(rp);
  TensorF fake;
  {
    NoGradGuard ng;
    fake = m.a2b(cfg.mode, x.center);
  }
  od.zero_grad();
  discriminator_loss(m.dy, y.center, fake).backward();
  od.step();
  EXPECT_EQ(snapshot(gp), g0);
  EXPECT_EQ(snapshot(rp), r0);

  const auto d0 = snapshot(dp);
  og.zero_grad();
  od.zero_grad();
  oreg.zero_grad();
  flowreg_objective(x, y, {m.gx, m.gy}, {m.dx, m.dy}, {m.reg_x, m.reg_y}, cfg.weights, 2).total.backward();
  og.step();
  oreg.step();
  EXPECT_EQ(snapshot(dp), d0);
  EXPECT_NE(snapshot(gp), g0);
  EXPECT_NE(snapshot(rp), r0);
}

TEST(Trainer, TwoStepRunsAreIdentical) {
  const auto data = tiny_phantom();
  std::vector<std::string> logs[2];
  for (auto& log : logs) {
    Trainer<float> t(tiny(Mode::flowreg), data.train_a, data.train_b);
    for (int i = 0; i < 2; ++i) log.push_back(t.step().to_json());
  }
  EXPECT_EQ(logs[0], logs[1]);
  const auto j = nlohmann::json::parse(logs[0][1]);
  EXPECT_EQ(j["step"], 1);
}

TEST(Trainer, RunWritesLogAndCheckpoint) {
  TempDir dir("run");
  const auto data = tiny_phantom();
  auto cfg = tiny(Mode::alignflow);
  cfg.epochs = 5;
  cfg.max_steps = 3;
  cfg.out_dir = dir.path();
  Trainer<float> t(cfg, data.train_a, data.train_b);
  const auto records = t.run();
  EXPECT_EQ(records.size(), 3u);
  std::ifstream log(dir.path() / "train_log.jsonl");
  int lines = 0;
  for (std::string line; std::getline(log, line);) {
    EXPECT_NO_THROW(nlohmann::json::parse(line));
    ++lines;
  }
  EXPECT_EQ(lines, 3);
  EXPECT_EQ(Checkpoint::load(dir.path() / "checkpoint.flwr").scalar("train.step"), 3.0);
}

TEST(Trainer, NonFiniteLossNamesTerm) {
  const auto data = tiny_phantom();
  Trainer<float> t(tiny(Mode::flowreg), data.train_a, data.train_b);
  const auto rp = t.models().regnet_parameters();
  for (const auto& p : rp.entries()) {
    auto handle = p.tensor;
    for (auto& v : handle.data_mut()) v = std::nanf("");
  }
  try {
    t.step();
    FAIL();
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("temporal_x"), std::string::npos) << e.what();
  }
}

TEST(Trainer, ShortStacksRejected) {
  auto data = tiny_phantom();
  data.train_a[0].slices.resize(2);
  EXPECT_THROW(Trainer<float>(tiny(Mode::alignflow), data.train_a, data.train_b), std::invalid_argument);
}

void write_inputs(const std::filesystem::path& dir, int count) {
  std::filesystem::create_directories(dir);
  for (int i = 0; i < count; ++i) {
    write_png(dir / ("s" + std::to_string(i) + ".png"), testing::random_image(40 + i, 32, 32, 0.3, 0.7), 16);
  }
}

double max_png_diff(const std::filesystem::path& a, const std::filesystem::path& b) {
  const auto x = read_png(a).image, y = read_png(b).image;
  double m = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) m = std::max(m, std::abs(x.pixels[i] - y.pixels[i]));
  return m;
}

TEST(Translate, IdentityCheckpointCopiesInputs) {
  TempDir dir("translate_id");
  const auto data = tiny_phantom();
  Trainer<float> t(tiny(Mode::alignflow), data.train_a, data.train_b);
  t.checkpoint().save(dir.path() / "ck.flwr");
  write_inputs(dir.path() / "in", 3);
  EXPECT_EQ(cmd_translate(dir.path() / "ck.flwr", dir.path() / "in", Direction::a2b, dir.path() / "out"), 3);
  for (int i = 0; i < 3; ++i) {
    const auto name = "s" + std::to_string(i) + ".png";
    EXPECT_EQ(read_png(dir.path() / "out" / name).bit_depth, 16);
    EXPECT_LE(max_png_diff(dir.path() / "in" / name, dir.path() / "out" / name), 1.0 / 65535 + 1e-6);
  }
}

TEST(Translate, RoundTripRecoversInput) {
  TempDir dir("translate_rt");
  const auto data = tiny_phantom();
  auto cfg = tiny(Mode::alignflow);
  cfg.precision = Precision::f64;
  Trainer<double> t(cfg, data.train_a, data.train_b);
  randomize_parameters(t.models().generator_parameters(cfg.mode), 5, 0.02);
  t.checkpoint().save(dir.path() / "ck.flwr");
  write_inputs(dir.path() / "in", 2);
  cmd_translate(dir.path() / "ck.flwr", dir.path() / "in", Direction::a2b, dir.path() / "ab");
  cmd_translate(dir.path() / "ck.flwr", dir.path() / "ab", Direction::b2a, dir.path() / "aba");
  for (int i = 0; i < 2; ++i) {
    const auto name = "s" + std::to_string(i) + ".png";
    EXPECT_GT(max_png_diff(dir.path() / "in" / name, dir.path() / "ab" / name), 1e-3);
    EXPECT_LE(max_png_diff(dir.path() / "in" / name, dir.path() / "aba" / name), 1e-3);
  }
}

TEST(Translate, MissingInputsThrow) {
  TempDir dir("translate_missing");
  EXPECT_THROW(cmd_translate(dir.path() / "none.flwr", dir.path(), Direction::a2b, dir.path() / "o"),
               std::runtime_error);
  EXPECT_THROW(parse_direction("X2Y"), std::invalid_argument);
}

TEST(Check, ReportIsJson) {
  const auto results = run_checks({.suite = "F3"});
  ASSERT_EQ(results.size(), 1u);
  EXPECT_TRUE(results[0].passed);
  const auto j = nlohmann::json::parse(check_report_json(results));
  EXPECT_EQ(j["passed"], true);
  EXPECT_EQ(j["suites"][0]["name"], "F3");
  EXPECT_TRUE(j["suites"][0].contains("max_error"));
}

TEST(Check, InjectedFaultFailsCycleSuite) {
  const auto results = run_checks({.suite = "F1", .inject_fault = true});
  ASSERT_EQ(results.size(), 1u);
  EXPECT_FALSE(results[0].passed);
}

}  // namespace
}  // namespace flowreg
