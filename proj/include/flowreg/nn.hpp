#pragma once

// Layer and network builders: PatchGAN discriminator, registration U-Net,
// baseline encoder/residual/decoder generator.

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "flowreg/ops.hpp"
#include "flowreg/tensor.hpp"

namespace flowreg {

// Stable seed derivation so every network draws from its own stream.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag);

template <typename T>
struct NamedParameter {
  std::string name;
  Tensor<T> tensor;
};

// Ordered name -> tensor map. Names are unique dotted paths such as
// "dx.layer0.weight"; the checkpoint format keys entries by them.
template <typename T>
class ParameterRegistry {
 public:
  void add(std::string name, Tensor<T> tensor);
  void append(const ParameterRegistry& other);
  const std::vector<NamedParameter<T>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  const Tensor<T>* find(std::string_view name) const;
  std::int64_t scalar_count() const;
  void zero_grad() const;

 private:
  std::vector<NamedParameter<T>> entries_;
};

// Overwrites every parameter with N(0, stddev) draws; entries whose name ends
// in ".scale" get 1 + N(0, stddev) instead. Used to test networks away from
// their (often degenerate) initialization.
template <typename T>
void randomize_parameters(const ParameterRegistry<T>& params, std::uint64_t seed, double stddev);

struct Init {
  enum class Kind { normal, he_normal, zeros };
  Kind kind = Kind::normal;
  double stddev = 0.02;

  static Init normal(double stddev = 0.02) { return {Kind::normal, stddev}; }
  static Init he() { return {Kind::he_normal, 0.0}; }
  static Init zeros() { return {Kind::zeros, 0.0}; }
};

template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor<T> forward(const Tensor<T>& x) const = 0;
  virtual void collect_parameters(const std::string& /*prefix*/,
                                  ParameterRegistry<T>& /*out*/) const {}
  virtual std::string kind() const = 0;
};

template <typename T>
class Conv2dLayer : public Layer<T> {
 public:
  Conv2dLayer(int in_channels, int out_channels, int kernel, int stride, int pad, Init init,
              std::mt19937_64& rng);
  Tensor<T> forward(const Tensor<T>& x) const override;
  void collect_parameters(const std::string& prefix, ParameterRegistry<T>& out) const override;
  std::string kind() const override { return "conv2d"; }
  const Tensor<T>& weight() const { return weight_; }
  const Tensor<T>& bias() const { return bias_; }

 private:
  Tensor<T> weight_, bias_;
  int stride_, pad_;
};

template <typename T>
class ConvTranspose2dLayer : public Layer<T> {
 public:
  ConvTranspose2dLayer(int in_channels, int out_channels, int kernel, int stride, int pad,
                       Init init, std::mt19937_64& rng);
  Tensor<T> forward(const Tensor<T>& x) const override;
  void collect_parameters(const std::string& prefix, ParameterRegistry<T>& out) const override;
  std::string kind() const override { return "conv_transpose2d"; }

 private:
  Tensor<T> weight_, bias_;
  int stride_, pad_;
};

template <typename T>
class InstanceNormLayer : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x) const override { return instance_norm(x); }
  std::string kind() const override { return "instance_norm"; }
};

template <typename T>
class ActivationLayer : public Layer<T> {
 public:
  explicit ActivationLayer(UnaryOp op) : op_(op) {}
  Tensor<T> forward(const Tensor<T>& x) const override { return elementwise(op_, x); }
  std::string kind() const override;

 private:
  UnaryOp op_;
};

// x + IN(conv(relu(IN(conv(x))))) with 3x3 same-size convolutions.
template <typename T>
class ResidualBlock : public Layer<T> {
 public:
  ResidualBlock(int channels, Init init, std::mt19937_64& rng);
  Tensor<T> forward(const Tensor<T>& x) const override;
  void collect_parameters(const std::string& prefix, ParameterRegistry<T>& out) const override;
  std::string kind() const override { return "residual"; }

 private:
  Conv2dLayer<T> first_, second_;
};

template <typename T>
class LayerStack {
 public:
  explicit LayerStack(std::string name = "net") : name_(std::move(name)) {}

  LayerStack& add(std::unique_ptr<Layer<T>> layer);
  template <typename L, typename... Args>
  LayerStack& emplace(Args&&... args) {
    return add(std::make_unique<L>(std::forward<Args>(args)...));
  }

  Tensor<T> forward(const Tensor<T>& x) const;
  // Registers "<prefix>.layerN.<param>" for every parameterised layer N.
  void collect_parameters(const std::string& prefix, ParameterRegistry<T>& out) const;
  ParameterRegistry<T> parameters() const;

  const std::string& name() const { return name_; }
  std::size_t size() const { return layers_.size(); }
  const Layer<T>& layer(std::size_t i) const { return *layers_.at(i); }

 private:
  std::string name_;
  std::vector<std::unique_ptr<Layer<T>>> layers_;
};

struct PatchGanOptions {
  std::string name = "d";
  int base_channels = 64;
  std::uint64_t seed = 0;
};

// 70x70 PatchGAN: C64-C128-C256-C512 (k4; stride 2,2,2,1) then a 1-channel
// k4 stride-1 map. Instance norm on all but the first block; leaky ReLU 0.2.
template <typename T>
LayerStack<T> build_patchgan(int in_channels, const PatchGanOptions& options = {});

// Receptive field of one output unit of the PatchGAN, in input pixels.
int patchgan_receptive_field();

struct GeneratorOptions {
  std::string name = "g";
  int base_channels = 32;
  std::uint64_t seed = 0;
};

// Two stride-2 convs, two residual blocks, two stride-2 transposed convs,
// tanh output. Input H and W must be divisible by 4.
template <typename T>
LayerStack<T> build_baseline_generator(int in_channels, const GeneratorOptions& options = {});

std::int64_t baseline_generator_parameter_count(int in_channels, int base_channels);

struct RegNetOptions {
  std::string name = "reg";
  int base_channels = 16;
  std::uint64_t seed = 0;
};

// U-Net emitting a B x 2 x H x W displacement field (pixels; channel 0 is
// horizontal, 1 vertical) for a B x 2 x H x W (fixed, moving) input. The
// output layer starts at zero, so the initial field is identically 0.
template <typename T>
class RegNet {
 public:
  RegNet(int levels, const RegNetOptions& options = {});

  Tensor<T> forward(const Tensor<T>& pair) const;
  Tensor<T> forward(const Tensor<T>& fixed, const Tensor<T>& moving) const;

  void collect_parameters(ParameterRegistry<T>& out) const;
  ParameterRegistry<T> parameters() const;
  int levels() const { return levels_; }
  const std::string& name() const { return name_; }

 private:
  std::string name_;
  int levels_;
  LayerStack<T> stem_;
  std::vector<LayerStack<T>> down_, up_, fuse_;
  LayerStack<T> head_;
};

template <typename T>
RegNet<T> build_regnet(int levels, const RegNetOptions& options = {}) {
  return RegNet<T>(levels, options);
}

// Registration depth used for a given image size (2 levels at 32, 3 at 128).
int default_regnet_levels(int image_size);

}  // namespace flowreg
