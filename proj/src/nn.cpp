#include "flowreg/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace flowreg {

std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
  // FNV-1a over the tag, mixed with the base seed through splitmix64.
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : tag) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (h | 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------

template <typename T>
void ParameterRegistry<T>::add(std::string name, Tensor<T> tensor) {
  if (find(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  entries_.push_back({std::move(name), std::move(tensor)});
}

template <typename T>
void ParameterRegistry<T>::append(const ParameterRegistry& other) {
  for (const auto& e : other.entries()) add(e.name, e.tensor);
}

template <typename T>
const Tensor<T>* ParameterRegistry<T>::find(std::string_view name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return &e.tensor;
  }
  return nullptr;
}

template <typename T>
std::int64_t ParameterRegistry<T>::scalar_count() const {
  std::int64_t n = 0;
  for (const auto& e : entries_) n += e.tensor.numel();
  return n;
}

template <typename T>
void ParameterRegistry<T>::zero_grad() const {
  for (auto e : entries_) e.tensor.zero_grad();
}

template <typename T>
void randomize_parameters(const ParameterRegistry<T>& params, std::uint64_t seed, double stddev) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, stddev);
  for (const auto& e : params.entries()) {
    const bool is_scale = e.name.size() >= 6 && e.name.compare(e.name.size() - 6, 6, ".scale") == 0;
    auto t = e.tensor;
    for (auto& v : t.data_mut()) v = static_cast<T>((is_scale ? 1.0 : 0.0) + normal(rng));
  }
}

// ---------------------------------------------------------------------------

namespace {

template <typename T>
Tensor<T> init_tensor(Shape shape, Init init, std::int64_t fan_in, std::mt19937_64& rng) {
  auto t = Tensor<T>::zeros(std::move(shape), true);
  if (init.kind == Init::Kind::zeros) return t;
  const double stddev =
      init.kind == Init::Kind::he_normal ? std::sqrt(2.0 / static_cast<double>(fan_in)) : init.stddev;
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.data_mut()) v = static_cast<T>(dist(rng));
  return t;
}

}  // namespace

template <typename T>
Conv2dLayer<T>::Conv2dLayer(int in_channels, int out_channels, int kernel, int stride, int pad,
                            Init init, std::mt19937_64& rng)
    : weight_(init_tensor<T>({out_channels, in_channels, kernel, kernel}, init,
                             static_cast<std::int64_t>(in_channels) * kernel * kernel, rng)),
      bias_(Tensor<T>::zeros({out_channels}, true)),
      stride_(stride),
      pad_(pad) {}

template <typename T>
Tensor<T> Conv2dLayer<T>::forward(const Tensor<T>& x) const {
  return conv2d(x, weight_, bias_, stride_, pad_);
}

template <typename T>
void Conv2dLayer<T>::collect_parameters(const std::string& prefix, ParameterRegistry<T>& out) const {
  out.add(prefix + ".weight", weight_);
  out.add(prefix + ".bias", bias_);
}

template <typename T>
ConvTranspose2dLayer<T>::ConvTranspose2dLayer(int in_channels, int out_channels, int kernel,
                                              int stride, int pad, Init init, std::mt19937_64& rng)
    : weight_(init_tensor<T>({in_channels, out_channels, kernel, kernel}, init,
                             static_cast<std::int64_t>(in_channels) * kernel * kernel, rng)),
      bias_(Tensor<T>::zeros({out_channels}, true)),
      stride_(stride),
      pad_(pad) {}

template <typename T>
Tensor<T> ConvTranspose2dLayer<T>::forward(const Tensor<T>& x) const {
  return conv_transpose2d(x, weight_, bias_, stride_, pad_);
}

template <typename T>
void ConvTranspose2dLayer<T>::collect_parameters(const std::string& prefix,
                                                 ParameterRegistry<T>& out) const {
  out.add(prefix + ".weight", weight_);
  out.add(prefix + ".bias", bias_);
}

template <typename T>
std::string ActivationLayer<T>::kind() const {
  switch (op_) {
    case UnaryOp::relu: return "relu";
    case UnaryOp::leaky_relu: return "leaky_relu";
    case UnaryOp::tanh: return "tanh";
    case UnaryOp::sigmoid: return "sigmoid";
    default: return "activation";
  }
}

template <typename T>
ResidualBlock<T>::ResidualBlock(int channels, Init init, std::mt19937_64& rng)
    : first_(channels, channels, 3, 1, 1, init, rng), second_(channels, channels, 3, 1, 1, init, rng) {}

template <typename T>
Tensor<T> ResidualBlock<T>::forward(const Tensor<T>& x) const {
  auto h = relu(instance_norm(first_.forward(x)));
  return x + instance_norm(second_.forward(h));
}

template <typename T>
void ResidualBlock<T>::collect_parameters(const std::string& prefix, ParameterRegistry<T>& out) const {
  first_.collect_parameters(prefix + ".conv0", out);
  second_.collect_parameters(prefix + ".conv1", out);
}

template <typename T>
LayerStack<T>& LayerStack<T>::add(std::unique_ptr<Layer<T>> layer) {
  layers_.push_back(std::move(layer));
  return *this;
}

template <typename T>
Tensor<T> LayerStack<T>::forward(const Tensor<T>& x) const {
  Tensor<T> h = x;
  for (const auto& layer : layers_) h = layer->forward(h);
  return h;
}

template <typename T>
void LayerStack<T>::collect_parameters(const std::string& prefix, ParameterRegistry<T>& out) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    layers_[i]->collect_parameters(prefix + ".layer" + std::to_string(i), out);
  }
}

template <typename T>
ParameterRegistry<T> LayerStack<T>::parameters() const {
  ParameterRegistry<T> out;
  collect_parameters(name_, out);
  return out;
}

// ---------------------------------------------------------------------------

int patchgan_receptive_field() {
  // Walk back from one output unit: rf = rf * stride + (kernel - stride).
  const int kernels[] = {4, 4, 4, 4, 4};
  const int strides[] = {2, 2, 2, 1, 1};
  int rf = 1;
  for (int i = 4; i >= 0; --i) rf = rf * strides[i] + (kernels[i] - strides[i]);
  return rf;
}

template <typename T>
LayerStack<T> build_patchgan(int in_channels, const PatchGanOptions& options) {
  if (in_channels < 1) throw std::invalid_argument("build_patchgan: in_channels must be >= 1");
  if (options.base_channels < 1) throw std::invalid_argument("build_patchgan: base_channels must be >= 1");
  std::mt19937_64 rng(derive_seed(options.seed, options.name));
  const int c = options.base_channels;
  const Init init = Init::normal(0.02);
  LayerStack<T> net(options.name);
  net.template emplace<Conv2dLayer<T>>(in_channels, c, 4, 2, 1, init, rng);
  net.template emplace<ActivationLayer<T>>(UnaryOp::leaky_relu);
  net.template emplace<Conv2dLayer<T>>(c, 2 * c, 4, 2, 1, init, rng);
  net.template emplace<InstanceNormLayer<T>>();
  net.template emplace<ActivationLayer<T>>(UnaryOp::leaky_relu);
  net.template emplace<Conv2dLayer<T>>(2 * c, 4 * c, 4, 2, 1, init, rng);
  net.template emplace<InstanceNormLayer<T>>();
  net.template emplace<ActivationLayer<T>>(UnaryOp::leaky_relu);
  net.template emplace<Conv2dLayer<T>>(4 * c, 8 * c, 4, 1, 1, init, rng);
  net.template emplace<InstanceNormLayer<T>>();
  net.template emplace<ActivationLayer<T>>(UnaryOp::leaky_relu);
  net.template emplace<Conv2dLayer<T>>(8 * c, 1, 4, 1, 1, init, rng);
  return net;
}

template <typename T>
LayerStack<T> build_baseline_generator(int in_channels, const GeneratorOptions& options) {
  if (in_channels < 1) throw std::invalid_argument("build_baseline_generator: in_channels must be >= 1");
  std::mt19937_64 rng(derive_seed(options.seed, options.name));
  const int c = options.base_channels;
  const Init init = Init::normal(0.02);
  LayerStack<T> net(options.name);
  net.template emplace<Conv2dLayer<T>>(in_channels, c, 4, 2, 1, init, rng);
  net.template emplace<InstanceNormLayer<T>>();
  net.template emplace<ActivationLayer<T>>(UnaryOp::relu);
  net.template emplace<Conv2dLayer<T>>(c, 2 * c, 4, 2, 1, init, rng);
  net.template emplace<InstanceNormLayer<T>>();
  net.template emplace<ActivationLayer<T>>(UnaryOp::relu);
  net.template emplace<ResidualBlock<T>>(2 * c, init, rng);
  net.template emplace<ResidualBlock<T>>(2 * c, init, rng);
  net.template emplace<ConvTranspose2dLayer<T>>(2 * c, c, 4, 2, 1, init, rng);
  net.template emplace<InstanceNormLayer<T>>();
  net.template emplace<ActivationLayer<T>>(UnaryOp::relu);
  net.template emplace<ConvTranspose2dLayer<T>>(c, in_channels, 4, 2, 1, init, rng);
  net.template emplace<ActivationLayer<T>>(UnaryOp::tanh);
  return net;
}

std::int64_t baseline_generator_parameter_count(int in_channels, int base_channels) {
  const std::int64_t i = in_channels, c = base_channels;
  const std::int64_t enc = (c * i * 16 + c) + (2 * c * c * 16 + 2 * c);
  const std::int64_t res = 2 * 2 * (2 * c * 2 * c * 9 + 2 * c);
  const std::int64_t dec = (2 * c * c * 16 + c) + (c * i * 16 + i);
  return enc + res + dec;
}

int default_regnet_levels(int image_size) { return image_size <= 32 ? 2 : 3; }

template <typename T>
RegNet<T>::RegNet(int levels, const RegNetOptions& options)
    : name_(options.name), levels_(levels), stem_(options.name + ".stem"), head_(options.name + ".head") {
  if (levels < 1) throw std::invalid_argument("build_regnet: levels must be >= 1");
  std::mt19937_64 rng(derive_seed(options.seed, options.name));
  const int w = options.base_channels;
  auto width = [w](int level) { return level == 0 ? w : 2 * w; };
  const Init init = Init::he();

  stem_.template emplace<Conv2dLayer<T>>(2, width(0), 3, 1, 1, init, rng);
  stem_.template emplace<ActivationLayer<T>>(UnaryOp::leaky_relu);
  for (int l = 0; l < levels; ++l) {
    LayerStack<T> down(options.name + ".down" + std::to_string(l));
    down.template emplace<Conv2dLayer<T>>(width(l), width(l + 1), 4, 2, 1, init, rng);
    down.template emplace<ActivationLayer<T>>(UnaryOp::leaky_relu);
    down_.push_back(std::move(down));
  }
  for (int l = levels - 1; l >= 0; --l) {
    LayerStack<T> up(options.name + ".up" + std::to_string(l));
    up.template emplace<ConvTranspose2dLayer<T>>(width(l + 1), width(l), 4, 2, 1, init, rng);
    up.template emplace<ActivationLayer<T>>(UnaryOp::leaky_relu);
    up_.push_back(std::move(up));
    LayerStack<T> fuse(options.name + ".fuse" + std::to_string(l));
    fuse.template emplace<Conv2dLayer<T>>(2 * width(l), width(l), 3, 1, 1, init, rng);
    fuse.template emplace<ActivationLayer<T>>(UnaryOp::leaky_relu);
    fuse_.push_back(std::move(fuse));
  }
  head_.template emplace<Conv2dLayer<T>>(width(0), 2, 3, 1, 1, Init::zeros(), rng);
}

template <typename T>
Tensor<T> RegNet<T>::forward(const Tensor<T>& pair) const {
  if (pair.rank() != 4 || pair.dim(1) != 2) {
    throw ShapeError("regnet expects a B x 2 x H x W (fixed, moving) input, got " +
                     shape_str(pair.shape()));
  }
  const std::int64_t factor = std::int64_t{1} << levels_;
  if (pair.dim(2) % factor != 0 || pair.dim(3) % factor != 0) {
    throw ShapeError("regnet with " + std::to_string(levels_) + " levels needs H, W divisible by " +
                     std::to_string(factor) + ", got " + shape_str(pair.shape()));
  }
  std::vector<Tensor<T>> skips;
  Tensor<T> h = stem_.forward(pair);
  for (const auto& down : down_) {
    skips.push_back(h);
    h = down.forward(h);
  }
  for (std::size_t i = 0; i < up_.size(); ++i) {
    h = up_[i].forward(h);
    h = fuse_[i].forward(concat_channels<T>({h, skips[skips.size() - 1 - i]}));
  }
  return head_.forward(h);
}

template <typename T>
Tensor<T> RegNet<T>::forward(const Tensor<T>& fixed, const Tensor<T>& moving) const {
  return forward(concat_channels<T>({fixed, moving}));
}

template <typename T>
void RegNet<T>::collect_parameters(ParameterRegistry<T>& out) const {
  stem_.collect_parameters(stem_.name(), out);
  for (const auto& s : down_) s.collect_parameters(s.name(), out);
  for (std::size_t i = 0; i < up_.size(); ++i) {
    up_[i].collect_parameters(up_[i].name(), out);
    fuse_[i].collect_parameters(fuse_[i].name(), out);
  }
  head_.collect_parameters(head_.name(), out);
}

template <typename T>
ParameterRegistry<T> RegNet<T>::parameters() const {
  ParameterRegistry<T> out;
  collect_parameters(out);
  return out;
}

#define FLOWREG_INSTANTIATE_NN(T)                                                         \
  template class ParameterRegistry<T>;                                                    \
  template class Conv2dLayer<T>;                                                          \
  template class ConvTranspose2dLayer<T>;                                                 \
  template class ActivationLayer<T>;                                                      \
  template class ResidualBlock<T>;                                                        \
  template class LayerStack<T>;                                                           \
  template class RegNet<T>;                                                               \
  template LayerStack<T> build_patchgan<T>(int, const PatchGanOptions&);                  \
  template LayerStack<T> build_baseline_generator<T>(int, const GeneratorOptions&);       \
  template void randomize_parameters(const ParameterRegistry<T>&, std::uint64_t, double);

FLOWREG_INSTANTIATE_NN(float)
FLOWREG_INSTANTIATE_NN(double)

#undef FLOWREG_INSTANTIATE_NN

}  // namespace flowreg
