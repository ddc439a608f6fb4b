#include "flowreg/config.hpp"

#include <fstream>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>
#include <stdexcept>

namespace flowreg {

using nlohmann::json;

std::string mode_name(Mode m) {
  switch (m) {
    case Mode::flowreg: return "flowreg";
    case Mode::alignflow: return "alignflow";
    case Mode::cycleflow: return "cycleflow";
    case Mode::cyclegan: return "cyclegan";
  }
  return "unknown";
}

Mode parse_mode(const std::string& s) {
  for (Mode m : {Mode::flowreg, Mode::alignflow, Mode::cycleflow, Mode::cyclegan}) {
    if (mode_name(m) == s) return m;
  }
  throw std::invalid_argument("unknown mode '" + s +
                              "' (expected flowreg, alignflow, cycleflow or cyclegan)");
}

bool is_flow_mode(Mode m) { return m != Mode::cyclegan; }

void TrainConfig::validate() const {
  weights.validate();
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument("invalid config: " + what);
  };
  require(lr > 0.0, "lr must be > 0");
  require(lr_decay_every >= 1, "lr_decay_every must be >= 1");
  require(lr_decay_factor >= 1.0, "lr_decay_factor must be >= 1");
  require(epochs >= 1, "epochs must be >= 1");
  require(batch >= 1, "batch must be >= 1");
  require(image_size >= 32 && image_size % 8 == 0, "image_size must be a multiple of 8, >= 32");
  require(temporal_margin >= 0 && 2 * temporal_margin < image_size, "temporal_margin out of range");
  require(checkpoint_every >= 1, "checkpoint_every must be >= 1");
  require(max_steps >= 0, "max_steps must be >= 0");
  require(network.flow_blocks >= 1, "network.flow_blocks must be >= 1");
  require(network.flow_hidden >= 1, "network.flow_hidden must be >= 1");
  require(network.disc_channels >= 1, "network.disc_channels must be >= 1");
  require(network.gen_channels >= 1, "network.gen_channels must be >= 1");
  require(network.reg_channels >= 1, "network.reg_channels must be >= 1");
  require(network.reg_levels >= 0 && network.reg_levels <= 4, "network.reg_levels must be in [0, 4]");
}

namespace {

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument("config: " + where + " must be an object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) {
      throw std::invalid_argument("config: unknown key '" + key + "' in " + where);
    }
  }
}

template <typename V>
void read(const json& j, const char* key, V& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception&) {
    throw std::invalid_argument(std::string("config: key '") + key + "' has the wrong type");
  }
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

}  // namespace

TrainConfig parse_config(const std::string& json_text, const std::filesystem::path& base_dir) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config is not valid JSON: ") + e.what());
  }
  reject_unknown(j,
                 {"mode", "weights", "network", "lr", "lr_decay_every", "lr_decay_factor",
                  "epochs", "batch", "image_size", "seed", "precision", "temporal_margin",
                  "checkpoint_every", "max_steps", "data", "out_dir"},
                 "top level");
  TrainConfig c;
  if (j.contains("mode")) c.mode = parse_mode(j["mode"].get<std::string>());
  read(j, "lr", c.lr);
  read(j, "lr_decay_every", c.lr_decay_every);
  read(j, "lr_decay_factor", c.lr_decay_factor);
  read(j, "epochs", c.epochs);
  read(j, "batch", c.batch);
  read(j, "image_size", c.image_size);
  read(j, "seed", c.seed);
  read(j, "temporal_margin", c.temporal_margin);
  read(j, "checkpoint_every", c.checkpoint_every);
  read(j, "max_steps", c.max_steps);
  if (j.contains("precision")) {
    const auto p = j["precision"].get<std::string>();
    if (p == "f32") {
      c.precision = Precision::f32;
    } else if (p == "f64") {
      c.precision = Precision::f64;
    } else {
      throw std::invalid_argument("config: precision must be f32 or f64, got '" + p + "'");
    }
  }
  if (j.contains("weights")) {
    const auto& w = j["weights"];
    reject_unknown(w,
                   {"lambda_cycle", "beta_identity", "lambda_x", "lambda_y", "lambda1", "lambda2",
                    "beta1", "beta2", "gamma1", "gamma2", "w_smooth"},
                   "weights");
    read(w, "lambda_cycle", c.weights.lambda_cycle);
    read(w, "beta_identity", c.weights.beta_identity);
    read(w, "lambda_x", c.weights.lambda_x);
    read(w, "lambda_y", c.weights.lambda_y);
    read(w, "lambda1", c.weights.lambda1);
    read(w, "lambda2", c.weights.lambda2);
    read(w, "beta1", c.weights.beta1);
    read(w, "beta2", c.weights.beta2);
    read(w, "gamma1", c.weights.gamma1);
    read(w, "gamma2", c.weights.gamma2);
    read(w, "w_smooth", c.weights.w_smooth);
  }
  if (j.contains("network")) {
    const auto& n = j["network"];
    reject_unknown(n,
                   {"flow_blocks", "flow_hidden", "disc_channels", "gen_channels", "reg_channels",
                    "reg_levels"},
                   "network");
    read(n, "flow_blocks", c.network.flow_blocks);
    read(n, "flow_hidden", c.network.flow_hidden);
    read(n, "disc_channels", c.network.disc_channels);
    read(n, "gen_channels", c.network.gen_channels);
    read(n, "reg_channels", c.network.reg_channels);
    read(n, "reg_levels", c.network.reg_levels);
  }
  if (j.contains("data")) {
    const auto& d = j["data"];
    reject_unknown(d, {"train_a", "train_b"}, "data");
    std::string a, b;
    read(d, "train_a", a);
    read(d, "train_b", b);
    if (!a.empty()) c.train_a = resolve(base_dir, a);
    if (!b.empty()) c.train_b = resolve(base_dir, b);
  }
  if (j.contains("out_dir")) c.out_dir = resolve(base_dir, j["out_dir"].get<std::string>());
  c.validate();
  return c;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.parent_path());
}

std::string config_to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["mode"] = mode_name(c.mode);
  j["weights"] = {{"lambda_cycle", c.weights.lambda_cycle}, {"beta_identity", c.weights.beta_identity},
                  {"lambda_x", c.weights.lambda_x},         {"lambda_y", c.weights.lambda_y},
                  {"lambda1", c.weights.lambda1},           {"lambda2", c.weights.lambda2},
                  {"beta1", c.weights.beta1},               {"beta2", c.weights.beta2},
                  {"gamma1", c.weights.gamma1},             {"gamma2", c.weights.gamma2},
                  {"w_smooth", c.weights.w_smooth}};
  j["network"] = {{"flow_blocks", c.network.flow_blocks},     {"flow_hidden", c.network.flow_hidden},
                  {"disc_channels", c.network.disc_channels}, {"gen_channels", c.network.gen_channels},
                  {"reg_channels", c.network.reg_channels},   {"reg_levels", c.network.reg_levels}};
  j["lr"] = c.lr;
  j["lr_decay_every"] = c.lr_decay_every;
  j["lr_decay_factor"] = c.lr_decay_factor;
  j["epochs"] = c.epochs;
  j["batch"] = c.batch;
  j["image_size"] = c.image_size;
  j["seed"] = c.seed;
  j["precision"] = c.precision == Precision::f32 ? "f32" : "f64";
  j["temporal_margin"] = c.temporal_margin;
  j["checkpoint_every"] = c.checkpoint_every;
  j["max_steps"] = c.max_steps;
  j["data"] = {{"train_a", c.train_a.string()}, {"train_b", c.train_b.string()}};
  j["out_dir"] = c.out_dir.string();
  return j.dump(2);
}

}  // namespace flowreg
