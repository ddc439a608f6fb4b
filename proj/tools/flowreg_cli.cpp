// flowreg: phantom generation, training, translation, evaluation, self-check.

#include <CLI11.hpp>

#include <iostream>

#include "flowreg/check.hpp"
#include "flowreg/checkpoint.hpp"
#include "flowreg/commands.hpp"
#include "flowreg/trainer.hpp"

int main(int argc, char** argv) {
  using namespace flowreg;
  CLI::App app{"Flow-based unpaired slice translation with deformation guidance"};
  app.require_subcommand(1);

  PhantomOptions phantom;
  std::string phantom_out = "phantom";
  auto* ph = app.add_subcommand("phantom", "Generate the synthetic two-domain phantom");
  ph->add_option("--seed", phantom.seed, "Random seed");
  ph->add_option("--subjects", phantom.subjects, "Training subjects per domain");
  ph->add_option("--test-subjects", phantom.test_subjects, "Paired test subjects");
  ph->add_option("--slices", phantom.slices, "Slices per subject");
  ph->add_option("--size", phantom.size, "Image size in pixels");
  ph->add_option("--out", phantom_out, "Output directory")->required();

  std::string config_path, mode, out_dir, resume;
  std::uint64_t seed = 0;
  auto* tr = app.add_subcommand("train", "Train a translation model");
  tr->add_option("--config", config_path, "JSON training config")->required()->check(CLI::ExistingFile);
  auto* mode_opt = tr->add_option("--mode", mode, "flowreg, alignflow, cycleflow or cyclegan");
  auto* seed_opt = tr->add_option("--seed", seed, "Override the config seed");
  auto* out_opt = tr->add_option("--out", out_dir, "Override the output directory");
  auto* resume_opt = tr->add_option("--resume", resume, "Checkpoint to continue from");

  std::string ckpt, in_dir, direction = "A2B", translate_out;
  auto* tl = app.add_subcommand("translate", "Translate a directory of PNG slices");
  tl->add_option("--ckpt", ckpt, "Checkpoint file")->required();
  tl->add_option("--dir", in_dir, "Input directory of PNG files")->required();
  tl->add_option("--direction", direction, "A2B or B2A");
  tl->add_option("--out", translate_out, "Output directory")->required();

  std::string pred_dir, ref_dir, report_path, montage_dir, src_dir, label;
  auto* ev = app.add_subcommand("evaluate", "Compare predictions with paired references");
  ev->add_option("--pred", pred_dir, "Predicted PNG directory")->required();
  ev->add_option("--ref", ref_dir, "Reference PNG directory")->required();
  ev->add_option("--out", report_path, "Report JSON path")->required();
  auto* montage_opt = ev->add_option("--montage", montage_dir, "Directory for montage PNGs");
  ev->add_option("--src", src_dir, "Source PNG directory (for montages)");
  ev->add_option("--direction", label, "Direction label stored in the report");

  CheckOptions check;
  auto* ck = app.add_subcommand("check", "Run the invariant suites");
  ck->add_option("--suite", check.suite, "Suite name (e.g. F1) or family prefix (e.g. W)");
  ck->add_flag("--inject-fault", check.inject_fault, "Break the coupling inverse");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*ph) {
      cmd_phantom(phantom, phantom_out);
      std::cout << "wrote phantom to " << phantom_out << "\n";
    } else if (*tr) {
      TrainOverrides o;
      if (*mode_opt) o.mode = parse_mode(mode);
      if (*seed_opt) o.seed = seed;
      if (*out_opt) o.out_dir = out_dir;
      if (*resume_opt) o.resume = resume;
      const auto steps = cmd_train(config_path, o);
      std::cout << "trained " << steps << " steps\n";
    } else if (*tl) {
      const int n = cmd_translate(ckpt, in_dir, parse_direction(direction), translate_out);
      std::cout << "translated " << n << " images\n";
    } else if (*ev) {
      std::optional<std::filesystem::path> montage, src;
      if (*montage_opt) montage = montage_dir;
      if (!src_dir.empty()) src = src_dir;
      cmd_evaluate(pred_dir, ref_dir, report_path, montage, src, label);
      std::cout << "wrote " << report_path << "\n";
    } else if (*ck) {
      const auto results = run_checks(check);
      std::cout << check_report_json(results) << "\n";
      for (const auto& r : results)
        if (!r.passed) return 1;
    }
  } catch (const TrainingError& e) {
    std::cerr << "training aborted: " << e.what() << "\n";
    return 3;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
