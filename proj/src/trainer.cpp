#include "flowreg/trainer.hpp"

#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>

#include "flowreg/ops.hpp"
#include "flowreg/warp.hpp"

namespace flowreg {

namespace {

FlowOptions flow_options(const TrainConfig& c, const char* name) {
  FlowOptions o;
  o.name = name;
  o.blocks = c.network.flow_blocks;
  o.hidden_channels = c.network.flow_hidden;
  o.seed = c.seed;
  return o;
}

int regnet_levels(const TrainConfig& c) {
  return c.network.reg_levels > 0 ? c.network.reg_levels : default_regnet_levels(c.image_size);
}

}  // namespace

template <typename T>
Models<T>::Models(const TrainConfig& c)
    : gx(1, flow_options(c, "gx")),
      gy(1, flow_options(c, "gy")),
      g_xy(build_baseline_generator<T>(1, {"g_xy", c.network.gen_channels, c.seed})),
      g_yx(build_baseline_generator<T>(1, {"g_yx", c.network.gen_channels, c.seed})),
      dx(build_patchgan<T>(1, {"dx", c.network.disc_channels, c.seed})),
      dy(build_patchgan<T>(1, {"dy", c.network.disc_channels, c.seed})),
      reg_x(regnet_levels(c), {"reg_x", c.network.reg_channels, c.seed}),
      reg_y(regnet_levels(c), {"reg_y", c.network.reg_channels, c.seed}) {}

template <typename T>
ParameterRegistry<T> Models<T>::generator_parameters(Mode mode) const {
  ParameterRegistry<T> r;
  switch (mode) {
    case Mode::flowreg:
    case Mode::alignflow:
      r.append(gx.parameters());
      r.append(gy.parameters());
      break;
    case Mode::cycleflow:
      r.append(gx.parameters());
      break;
    case Mode::cyclegan:
      r.append(g_xy.parameters());
      r.append(g_yx.parameters());
      break;
  }
  return r;
}

template <typename T>
ParameterRegistry<T> Models<T>::discriminator_parameters() const {
  ParameterRegistry<T> r;
  r.append(dx.parameters());
  r.append(dy.parameters());
  return r;
}

template <typename T>
ParameterRegistry<T> Models<T>::regnet_parameters() const {
  ParameterRegistry<T> r;
  r.append(reg_x.parameters());
  r.append(reg_y.parameters());
  return r;
}

template <typename T>
ParameterRegistry<T> Models<T>::all_parameters() const {
  ParameterRegistry<T> r;
  r.append(gx.parameters());
  r.append(gy.parameters());
  r.append(g_xy.parameters());
  r.append(g_yx.parameters());
  r.append(discriminator_parameters());
  r.append(regnet_parameters());
  return r;
}

template <typename T>
ParameterRegistry<T> Models<T>::buffers() const {
  ParameterRegistry<T> r;
  r.append(gx.buffers());
  r.append(gy.buffers());
  return r;
}

template <typename T>
Tensor<T> Models<T>::a2b(Mode mode, const Tensor<T>& x) const {
  switch (mode) {
    case Mode::cycleflow: return cycleflow_forward(gx, x);
    case Mode::cyclegan: return g_xy.forward(x);
    default: return translate(gx, gy, x);
  }
}

template <typename T>
Tensor<T> Models<T>::b2a(Mode mode, const Tensor<T>& y) const {
  switch (mode) {
    case Mode::cycleflow: return cycleflow_inverse(gx, y);
    case Mode::cyclegan: return g_yx.forward(y);
    default: return translate(gy, gx, y);
  }
}

template <typename T>
Tensor<T> images_to_tensor(const std::vector<Image>& images) {
  if (images.empty()) throw std::invalid_argument("images_to_tensor: no images");
  const int h = images[0].height, w = images[0].width;
  std::vector<T> data;
  data.reserve(images.size() * images[0].size());
  for (const auto& img : images) {
    if (img.height != h || img.width != w) {
      throw ShapeError("images_to_tensor: images have different sizes");
    }
    for (double v : img.pixels) data.push_back(static_cast<T>(v));
  }
  return Tensor<T>({static_cast<std::int64_t>(images.size()), 1, h, w}, std::move(data));
}

template <typename T>
Image tensor_to_image(const Tensor<T>& t, std::int64_t index) {
  if (t.rank() != 4 || t.dim(1) != 1 || index < 0 || index >= t.dim(0)) {
    throw ShapeError("tensor_to_image: expected B x 1 x H x W, got " + shape_str(t.shape()));
  }
  const int h = static_cast<int>(t.dim(2)), w = static_cast<int>(t.dim(3));
  Image img(h, w);
  const auto d = t.data();
  const auto offset = static_cast<std::size_t>(index * h * w);
  for (std::size_t i = 0; i < img.size(); ++i) img.pixels[i] = static_cast<double>(d[offset + i]);
  return img;
}

template <typename T>
TripletBatch<T> triplets_to_batch(const std::vector<SliceTriplet>& triplets) {
  std::vector<Image> prev, center, next;
  for (const auto& t : triplets) {
    prev.push_back(t.prev);
    center.push_back(t.center);
    next.push_back(t.next);
  }
  return {images_to_tensor<T>(prev), images_to_tensor<T>(center), images_to_tensor<T>(next)};
}

std::string StepRecord::to_json() const {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["epoch"] = epoch;
  j["lr"] = lr;
  j["d_x"] = d_x;
  j["d_y"] = d_y;
  auto& terms = j["terms"] = nlohmann::ordered_json::object();
  for (const auto& t : g.terms) terms[t.name] = t.value;
  auto& weights = j["weights"] = nlohmann::ordered_json::object();
  for (const auto& t : g.terms) weights[t.name] = t.weight;
  j["total"] = g.total;
  return j.dump();
}

template <typename T>
Trainer<T>::Trainer(TrainConfig config, const std::vector<SliceStack>& domain_a,
                    const std::vector<SliceStack>& domain_b)
    : config_(std::move(config)),
      models_(config_),
      opt_g_("adam_g", models_.generator_parameters(config_.mode), {config_.lr}),
      opt_d_("adam_d", models_.discriminator_parameters(), {config_.lr}),
      opt_reg_("adam_reg", models_.regnet_parameters(), {config_.lr}) {
  config_.validate();
  for (const auto& s : domain_a) a_.push_back(preprocess(s, config_.image_size));
  for (const auto& s : domain_b) b_.push_back(preprocess(s, config_.image_size));
  if (a_.empty() || b_.empty()) throw std::invalid_argument("training needs stacks in both domains");
  for (const auto* set : {&a_, &b_}) {
    for (const auto& s : *set) {
      if (s.slices.size() < 3) {
        throw std::invalid_argument("stack " + s.subject_id + " has fewer than 3 slices");
      }
    }
  }
  const auto centers = std::max(count_centers(a_), count_centers(b_));
  steps_per_epoch_ = (centers + config_.batch - 1) / config_.batch;
}

template <typename T>
std::int64_t Trainer<T>::total_steps() const {
  const auto full = steps_per_epoch_ * config_.epochs;
  return config_.max_steps > 0 ? std::min(full, config_.max_steps) : full;
}

template <typename T>
void Trainer<T>::initialize_actnorm(const TripletBatch<T>& x, const TripletBatch<T>& y) {
  if (!is_flow_mode(config_.mode)) return;
  const bool x_done = models_.gx.buffers().entries().front().tensor.data()[0] != T(0);
  if (!x_done) models_.gx.data_init(x.center);
  if (config_.mode == Mode::cycleflow) return;
  const bool y_done = models_.gy.buffers().entries().front().tensor.data()[0] != T(0);
  if (!y_done) models_.gy.data_init(y.center);
}

template <typename T>
StepRecord Trainer<T>::step() {
  StepRecord rec;
  rec.step = step_;
  rec.epoch = static_cast<int>(step_ / steps_per_epoch_);
  rec.lr = lr_at(rec.epoch, config_.lr, config_.lr_decay_every, config_.lr_decay_factor);
  opt_g_.set_lr(rec.lr);
  opt_d_.set_lr(rec.lr);
  opt_reg_.set_lr(rec.lr);

  std::seed_seq seq{static_cast<std::uint32_t>(config_.seed),
                    static_cast<std::uint32_t>(config_.seed >> 32),
                    static_cast<std::uint32_t>(step_), static_cast<std::uint32_t>(step_ >> 32)};
  std::mt19937_64 rng(seq);
  const auto x = triplets_to_batch<T>(sample_triplets(a_, config_.batch, rng));
  const auto y = triplets_to_batch<T>(sample_triplets(b_, config_.batch, rng));
  initialize_actnorm(x, y);
  const Mode mode = config_.mode;

  // Discriminators on detached translations.
  {
    Tensor<T> fake_y, fake_x;
    {
      NoGradGuard no_grad;
      fake_y = models_.a2b(mode, x.center);
      fake_x = models_.b2a(mode, y.center);
    }
    opt_d_.zero_grad();
    auto loss_y = discriminator_loss(models_.dy, y.center, fake_y);
    auto loss_x = discriminator_loss(models_.dx, x.center, fake_x);
    rec.d_x = static_cast<double>(loss_x.item());
    rec.d_y = static_cast<double>(loss_y.item());
    if (!std::isfinite(rec.d_x) || !std::isfinite(rec.d_y)) {
      throw TrainingError("non-finite discriminator loss at step " + std::to_string(step_) +
                          " (term " + (std::isfinite(rec.d_x) ? "d_y" : "d_x") + ")");
    }
    (loss_x + loss_y).backward();
    opt_d_.step();
  }

  // Generators (and registration networks in flowreg mode).
  opt_g_.zero_grad();
  opt_d_.zero_grad();
  opt_reg_.zero_grad();
  const FlowPair<T> g{models_.gx, models_.gy};
  const DiscriminatorPair<T> d{models_.dx, models_.dy};
  ObjectiveResult<T> obj;
  switch (mode) {
    case Mode::flowreg:
      obj = flowreg_objective(x, y, g, d, RegNetPair<T>{models_.reg_x, models_.reg_y},
                              config_.weights, config_.temporal_margin);
      break;
    case Mode::alignflow:
      obj = alignflow_objective(x.center, y.center, g, d, config_.weights);
      break;
    case Mode::cycleflow:
      obj = cycleflow_objective(x.center, y.center, models_.gx, d);
      break;
    case Mode::cyclegan:
      obj = cyclegan_objective(x.center, y.center, models_.g_xy, models_.g_yx, d, config_.weights);
      break;
  }
  rec.g = obj.report;
  const auto bad = rec.g.first_non_finite();
  if (!bad.empty()) {
    throw TrainingError("non-finite loss at step " + std::to_string(step_) + " (term " + bad + ")");
  }
  obj.total.backward();
  opt_g_.step();
  if (mode == Mode::flowreg) opt_reg_.step();
  opt_d_.zero_grad();
  ++step_;
  return rec;
}

template <typename T>
std::vector<StepRecord> Trainer<T>::run(const std::function<void(const StepRecord&)>& on_step) {
  std::filesystem::create_directories(config_.out_dir);
  const auto log_path = config_.out_dir / "train_log.jsonl";
  std::ofstream log(log_path, step_ == 0 ? std::ios::trunc : std::ios::app);
  if (!log) throw std::runtime_error("cannot open training log " + log_path.string());
  std::vector<StepRecord> records;
  const auto end = total_steps();
  while (step_ < end) {
    auto rec = step();
    log << rec.to_json() << "\n";
    log.flush();
    if (on_step) on_step(rec);
    const bool epoch_done = step_ % steps_per_epoch_ == 0;
    const auto epochs_done = step_ / steps_per_epoch_;
    if (step_ == end || (epoch_done && epochs_done % config_.checkpoint_every == 0)) {
      checkpoint().save(config_.out_dir / "checkpoint.flwr");
    }
    records.push_back(std::move(rec));
  }
  return records;
}

template <typename T>
Checkpoint Trainer<T>::checkpoint() const {
  Checkpoint ck;
  const auto& c = config_;
  ck.add_scalar("meta.mode", static_cast<double>(c.mode));
  ck.add_scalar("meta.precision", c.precision == Precision::f32 ? 32.0 : 64.0);
  ck.add_scalar("meta.image_size", c.image_size);
  ck.add_scalar("meta.seed_lo", static_cast<double>(c.seed & 0xffffffffu));
  ck.add_scalar("meta.seed_hi", static_cast<double>(c.seed >> 32));
  ck.add_scalar("meta.flow_blocks", c.network.flow_blocks);
  ck.add_scalar("meta.flow_hidden", c.network.flow_hidden);
  ck.add_scalar("meta.disc_channels", c.network.disc_channels);
  ck.add_scalar("meta.gen_channels", c.network.gen_channels);
  ck.add_scalar("meta.reg_channels", c.network.reg_channels);
  ck.add_scalar("meta.reg_levels", regnet_levels(c));
  ck.add_scalar("train.step", static_cast<double>(step_));
  ck.add_registry(models_.all_parameters());
  ck.add_registry(models_.buffers());
  opt_g_.save_state(ck);
  opt_d_.save_state(ck);
  opt_reg_.save_state(ck);
  return ck;
}

template <typename T>
void load_models(Models<T>& models, const Checkpoint& ck) {
  ck.load_registry(models.all_parameters());
  ck.load_registry(models.buffers());
}

template <typename T>
void Trainer<T>::restore(const Checkpoint& ck) {
  const auto stored = config_from_checkpoint(ck);
  if (stored.mode != config_.mode || stored.image_size != config_.image_size) {
    throw std::invalid_argument("checkpoint was written for mode " + mode_name(stored.mode) +
                                " at size " + std::to_string(stored.image_size) +
                                ", not mode " + mode_name(config_.mode) + " at size " +
                                std::to_string(config_.image_size));
  }
  load_models(models_, ck);
  opt_g_.load_state(ck);
  opt_d_.load_state(ck);
  opt_reg_.load_state(ck);
  step_ = static_cast<std::int64_t>(ck.scalar("train.step"));
}

TrainConfig config_from_checkpoint(const Checkpoint& ck) {
  TrainConfig c;
  const auto mode = static_cast<int>(ck.scalar("meta.mode"));
  if (mode < 0 || mode > 3) throw std::invalid_argument("checkpoint has an invalid mode");
  c.mode = static_cast<Mode>(mode);
  c.precision = ck.scalar("meta.precision") == 64.0 ? Precision::f64 : Precision::f32;
  c.image_size = static_cast<int>(ck.scalar("meta.image_size"));
  c.seed = static_cast<std::uint64_t>(ck.scalar("meta.seed_lo")) |
           (static_cast<std::uint64_t>(ck.scalar("meta.seed_hi")) << 32);
  c.network.flow_blocks = static_cast<int>(ck.scalar("meta.flow_blocks"));
  c.network.flow_hidden = static_cast<int>(ck.scalar("meta.flow_hidden"));
  c.network.disc_channels = static_cast<int>(ck.scalar("meta.disc_channels"));
  c.network.gen_channels = static_cast<int>(ck.scalar("meta.gen_channels"));
  c.network.reg_channels = static_cast<int>(ck.scalar("meta.reg_channels"));
  c.network.reg_levels = static_cast<int>(ck.scalar("meta.reg_levels"));
  return c;
}

template <typename T>
std::vector<SliceStack> translate_stacks(const Models<T>& models, Mode mode,
                                         const std::vector<SliceStack>& stacks, bool a2b) {
  NoGradGuard no_grad;
  std::vector<SliceStack> out;
  for (const auto& s : stacks) {
    SliceStack t = s;
    t.domain = a2b ? Domain::B : Domain::A;
    for (auto& img : t.slices) {
      const auto x = images_to_tensor<T>({img});
      img = tensor_to_image(a2b ? models.a2b(mode, x) : models.b2a(mode, x));
    }
    out.push_back(std::move(t));
  }
  return out;
}

double temporal_consistency_error(const std::vector<SliceStack>& translated,
                                  const std::vector<SliceStack>& source, int margin) {
  if (translated.size() != source.size()) {
    throw std::invalid_argument("temporal_consistency_error: stack counts differ");
  }
  double total = 0.0;
  std::int64_t count = 0;
  for (std::size_t i = 0; i < source.size(); ++i) {
    const auto& src = source[i];
    const auto& out = translated[i];
    const int n = static_cast<int>(src.slices.size());
    for (int t = 1; t + 1 < n; ++t) {
      const auto center = images_to_tensor<double>({out.slices[static_cast<std::size_t>(t)]});
      std::vector<Tensor<double>> neighbors, fields;
      for (int k : {t - 1, t + 1}) {
        const auto f = oracle_field(src, t, k);
        neighbors.push_back(images_to_tensor<double>({out.slices[static_cast<std::size_t>(k)]}));
        std::vector<double> phi(f.dx.pixels);
        phi.insert(phi.end(), f.dy.pixels.begin(), f.dy.pixels.end());
        fields.emplace_back(Shape{1, 2, f.dx.height, f.dx.width}, std::move(phi));
      }
      total += temporal_reg_loss(center, neighbors, fields, margin).item();
      ++count;
    }
  }
  return count > 0 ? total / static_cast<double>(count) : 0.0;
}

MetricReport evaluate_stacks(const std::vector<SliceStack>& pred, const std::vector<SliceStack>& ref,
                             const std::string& direction) {
  if (pred.size() != ref.size()) throw std::invalid_argument("evaluate_stacks: stack counts differ");
  std::vector<ImageMetrics> images;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i].slices.size() != ref[i].slices.size()) {
      throw std::invalid_argument("evaluate_stacks: slice counts differ for " + ref[i].subject_id);
    }
    for (std::size_t k = 0; k < pred[i].slices.size(); ++k) {
      images.push_back(compare_images(ref[i].subject_id + "_" + std::to_string(k),
                                      pred[i].slices[k], ref[i].slices[k]));
    }
  }
  return aggregate(direction, std::move(images));
}

#define FLOWREG_INSTANTIATE_TRAINER(T)                                                    \
  template struct Models<T>;                                                              \
  template class Trainer<T>;                                                              \
  template Tensor<T> images_to_tensor<T>(const std::vector<Image>&);                      \
  template Image tensor_to_image(const Tensor<T>&, std::int64_t);                         \
  template TripletBatch<T> triplets_to_batch<T>(const std::vector<SliceTriplet>&);        \
  template void load_models(Models<T>&, const Checkpoint&);                               \
  template std::vector<SliceStack> translate_stacks(const Models<T>&, Mode,               \
                                                    const std::vector<SliceStack>&, bool);

FLOWREG_INSTANTIATE_TRAINER(float)
FLOWREG_INSTANTIATE_TRAINER(double)

#undef FLOWREG_INSTANTIATE_TRAINER

}  // namespace flowreg
