#pragma once

// Model bundle, training loop, checkpoint persistence and evaluation helpers.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowreg/checkpoint.hpp"
#include "flowreg/config.hpp"
#include "flowreg/data.hpp"
#include "flowreg/flow.hpp"
#include "flowreg/metrics.hpp"
#include "flowreg/nn.hpp"
#include "flowreg/objectives.hpp"
#include "flowreg/optim.hpp"

namespace flowreg {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Every network of every mode, built from the config seed so that all modes
// draw identical initial weights for the networks they share.
template <typename T>
struct Models {
  explicit Models(const TrainConfig& config);

  FlowModel<T> gx, gy;          // flow modes (cycleflow uses gx alone)
  LayerStack<T> g_xy, g_yx;     // cyclegan
  LayerStack<T> dx, dy;
  RegNet<T> reg_x, reg_y;

  ParameterRegistry<T> generator_parameters(Mode mode) const;
  ParameterRegistry<T> discriminator_parameters() const;
  ParameterRegistry<T> regnet_parameters() const;
  ParameterRegistry<T> all_parameters() const;
  ParameterRegistry<T> buffers() const;

  Tensor<T> a2b(Mode mode, const Tensor<T>& x) const;
  Tensor<T> b2a(Mode mode, const Tensor<T>& y) const;
};

// Stacks images as a B x 1 x H x W tensor.
template <typename T>
Tensor<T> images_to_tensor(const std::vector<Image>& images);
template <typename T>
Image tensor_to_image(const Tensor<T>& t, std::int64_t index = 0);

template <typename T>
TripletBatch<T> triplets_to_batch(const std::vector<SliceTriplet>& triplets);

struct StepRecord {
  std::int64_t step = 0;
  int epoch = 0;
  double lr = 0.0;
  double d_x = 0.0, d_y = 0.0;
  LossReport g;

  std::string to_json() const;
};

template <typename T>
class Trainer {
 public:
  // Stacks hold [0, 1] slices; they are preprocessed to config.image_size.
  Trainer(TrainConfig config, const std::vector<SliceStack>& domain_a,
          const std::vector<SliceStack>& domain_b);

  // One D -> G -> Reg update; the sampled batch depends only on (seed, step).
  StepRecord step();

  // Runs to the configured length (or max_steps), appending JSON lines to
  // out_dir/train_log.jsonl and saving out_dir/checkpoint.flwr. Returns the
  // records produced by this call.
  std::vector<StepRecord> run(const std::function<void(const StepRecord&)>& on_step = {});

  Checkpoint checkpoint() const;
  void restore(const Checkpoint& ck);

  std::int64_t steps_per_epoch() const { return steps_per_epoch_; }
  std::int64_t total_steps() const;
  std::int64_t global_step() const { return step_; }
  const TrainConfig& config() const { return config_; }
  const Models<T>& models() const { return models_; }
  Models<T>& models() { return models_; }

 private:
  void initialize_actnorm(const TripletBatch<T>& x, const TripletBatch<T>& y);

  TrainConfig config_;
  std::vector<SliceStack> a_, b_;
  Models<T> models_;
  Adam<T> opt_g_, opt_d_, opt_reg_;
  std::int64_t steps_per_epoch_ = 1;
  std::int64_t step_ = 0;
};

// Rebuilds the configuration stored in a checkpoint's meta entries.
TrainConfig config_from_checkpoint(const Checkpoint& ck);

// Loads parameters and buffers of every network from a checkpoint.
template <typename T>
void load_models(Models<T>& models, const Checkpoint& ck);

// Translates every slice of each stack, A -> B when `a2b` (stacks in [-1, 1]).
template <typename T>
std::vector<SliceStack> translate_stacks(const Models<T>& models, Mode mode,
                                         const std::vector<SliceStack>& stacks, bool a2b);

// Mean over centers t of sum_k mean|G(x_t) - warp(G(x_k), phi_k)| on the
// interior, with phi_k the recorded-motion field moving slice k onto t.
// `translated` are the per-slice outputs of G for stacks with motion.
double temporal_consistency_error(const std::vector<SliceStack>& translated,
                                  const std::vector<SliceStack>& source, int margin);

// Per-slice metrics of predicted vs reference stacks (both in [-1, 1]).
MetricReport evaluate_stacks(const std::vector<SliceStack>& pred,
                             const std::vector<SliceStack>& ref, const std::string& direction);

}  // namespace flowreg
