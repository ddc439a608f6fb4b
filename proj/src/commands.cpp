#include "flowreg/commands.hpp"

#include <fstream>
#include <iostream>
#include <stdexcept>

#include "flowreg/metrics.hpp"
#include "flowreg/trainer.hpp"

namespace flowreg {

namespace fs = std::filesystem;

void cmd_phantom(const PhantomOptions& options, const fs::path& out_dir) {
  write_phantom(generate_phantom(options), out_dir);
}

namespace {

template <typename T>
std::int64_t train_as(const TrainConfig& config, const std::optional<fs::path>& resume) {
  const auto a = load_stack(config.train_a);
  const auto b = load_stack(config.train_b);
  Trainer<T> trainer(config, a, b);
  if (resume) trainer.restore(Checkpoint::load(*resume));
  fs::create_directories(config.out_dir);
  std::ofstream(config.out_dir / "config.json") << config_to_json(config) << "\n";
  const auto records = trainer.run([&](const StepRecord& r) {
    if ((r.step + 1) % trainer.steps_per_epoch() == 0) {
      std::cerr << "epoch " << r.epoch << " step " << r.step + 1 << "/" << trainer.total_steps()
                << " total " << r.g.total << "\n";
    }
  });
  return static_cast<std::int64_t>(records.size());
}

}  // namespace

std::int64_t train_with_config(TrainConfig config, const std::optional<fs::path>& resume) {
  config.validate();
  if (config.train_a.empty() || config.train_b.empty()) {
    throw std::invalid_argument("invalid config: data.train_a and data.train_b are required");
  }
  return config.precision == Precision::f64 ? train_as<double>(config, resume)
                                            : train_as<float>(config, resume);
}

std::int64_t cmd_train(const fs::path& config_path, const TrainOverrides& o) {
  auto config = load_config(config_path);
  if (o.mode) config.mode = *o.mode;
  if (o.seed) config.seed = *o.seed;
  if (o.out_dir) config.out_dir = *o.out_dir;
  return train_with_config(config, o.resume);
}

Direction parse_direction(const std::string& s) {
  if (s == "A2B") return Direction::a2b;
  if (s == "B2A") return Direction::b2a;
  throw std::invalid_argument("direction must be A2B or B2A, got '" + s + "'");
}

namespace {

template <typename T>
int translate_as(const Checkpoint& ck, const TrainConfig& config, const fs::path& in_dir,
                 Direction direction, const fs::path& out_dir) {
  Models<T> models(config);
  load_models(models, ck);
  const auto files = list_png(in_dir);
  fs::create_directories(out_dir);
  NoGradGuard no_grad;
  for (const auto& f : files) {
    const auto png = read_png(f);
    const auto x = images_to_tensor<T>({preprocess(png.image, config.image_size)});
    const auto out = direction == Direction::a2b ? models.a2b(config.mode, x)
                                                 : models.b2a(config.mode, x);
    Image img = tensor_to_image(out);
    for (auto& v : img.pixels) v = (v + 1.0) / 2.0;
    write_png(out_dir / f.filename(), img, png.bit_depth);
  }
  return static_cast<int>(files.size());
}

}  // namespace

int cmd_translate(const fs::path& checkpoint, const fs::path& in_dir, Direction direction,
                  const fs::path& out_dir) {
  if (!fs::exists(checkpoint)) throw std::runtime_error("checkpoint not found: " + checkpoint.string());
  if (!fs::is_directory(in_dir)) throw std::runtime_error("input directory not found: " + in_dir.string());
  const auto ck = Checkpoint::load(checkpoint);
  const auto config = config_from_checkpoint(ck);
  return config.precision == Precision::f64
             ? translate_as<double>(ck, config, in_dir, direction, out_dir)
             : translate_as<float>(ck, config, in_dir, direction, out_dir);
}

void cmd_evaluate(const fs::path& pred_dir, const fs::path& ref_dir, const fs::path& out_json,
                  const std::optional<fs::path>& montage_dir, const std::optional<fs::path>& src_dir,
                  const std::string& direction) {
  const auto report = evaluate_set(pred_dir, ref_dir, direction);
  if (out_json.has_parent_path()) fs::create_directories(out_json.parent_path());
  std::ofstream out(out_json);
  if (!out) throw std::runtime_error("cannot write report " + out_json.string());
  out << report.to_json() << "\n";
  if (montage_dir) {
    if (!src_dir) throw std::invalid_argument("a montage needs the source directory (--src)");
    fs::create_directories(*montage_dir);
    for (const auto& m : report.images) {
      const auto src = read_png(*src_dir / m.name).image;
      const auto pred = read_png(pred_dir / m.name).image;
      const auto ref = read_png(ref_dir / m.name).image;
      write_png(*montage_dir / m.name, montage({resize_bilinear(src, ref.height, ref.width), pred, ref}));
    }
  }
}

}  // namespace flowreg
