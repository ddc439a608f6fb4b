#pragma once

// Implementations behind the command-line subcommands.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "flowreg/config.hpp"
#include "flowreg/data.hpp"

namespace flowreg {

void cmd_phantom(const PhantomOptions& options, const std::filesystem::path& out_dir);

struct TrainOverrides {
  std::optional<Mode> mode;
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out_dir;
  std::optional<std::filesystem::path> resume;  // checkpoint to continue from
};

// Returns the number of steps run.
std::int64_t cmd_train(const std::filesystem::path& config_path, const TrainOverrides& overrides);
std::int64_t train_with_config(TrainConfig config, const std::optional<std::filesystem::path>& resume);

enum class Direction { a2b, b2a };
Direction parse_direction(const std::string& s);

// Translates every PNG in `in_dir`; outputs keep the file name and bit depth.
// Returns the number of images written.
int cmd_translate(const std::filesystem::path& checkpoint, const std::filesystem::path& in_dir,
                  Direction direction, const std::filesystem::path& out_dir);

// Writes the metric report JSON; with `montage_dir` and `src_dir` also writes
// one source | prediction | reference PNG per image.
void cmd_evaluate(const std::filesystem::path& pred_dir, const std::filesystem::path& ref_dir,
                  const std::filesystem::path& out_json,
                  const std::optional<std::filesystem::path>& montage_dir = std::nullopt,
                  const std::optional<std::filesystem::path>& src_dir = std::nullopt,
                  const std::string& direction = "");

}  // namespace flowreg
