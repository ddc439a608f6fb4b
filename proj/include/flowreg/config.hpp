#pragma once

// Training configuration, read from JSON. Unknown keys are rejected.

#include <cstdint>
#include <filesystem>
#include <string>

#include "flowreg/objectives.hpp"

namespace flowreg {

enum class Mode { flowreg, alignflow, cycleflow, cyclegan };

std::string mode_name(Mode m);
Mode parse_mode(const std::string& s);
bool is_flow_mode(Mode m);

enum class Precision { f32, f64 };

struct NetworkConfig {
  int flow_blocks = 3;
  int flow_hidden = 64;
  int disc_channels = 64;
  int gen_channels = 32;
  int reg_channels = 16;
  int reg_levels = 0;  // 0: chosen from image size
};

struct TrainConfig {
  Mode mode = Mode::flowreg;
  LossWeights weights;
  NetworkConfig network;
  double lr = 2e-4;
  int lr_decay_every = 20;
  double lr_decay_factor = 10.0;
  int epochs = 15;
  int batch = 2;
  int image_size = 32;
  std::uint64_t seed = 1;
  Precision precision = Precision::f32;
  int temporal_margin = 2;
  int checkpoint_every = 5;  // epochs; the final epoch is always saved
  std::int64_t max_steps = 0;  // 0: no limit
  std::filesystem::path train_a, train_b;  // manifest files
  std::filesystem::path out_dir = "run";

  // Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
};

// Relative paths are resolved against `base_dir`.
TrainConfig parse_config(const std::string& json_text, const std::filesystem::path& base_dir = {});
TrainConfig load_config(const std::filesystem::path& path);
std::string config_to_json(const TrainConfig& config);

}  // namespace flowreg
