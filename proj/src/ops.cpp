#include "flowreg/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <string>

#include "flowreg/parallel.hpp"

namespace flowreg {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
using Node = detail::Node<T>;

template <typename T>
Node<T>& input(Node<T>& self, std::size_t i) {
  return *self.inputs[i];
}

void require_rank4(const Shape& s, const char* what) {
  if (s.size() != 4) {
    throw ShapeError(std::string(what) + " expects a rank-4 tensor, got " + shape_str(s));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> elementwise(UnaryOp op, const Tensor<T>& a) {
  const auto x = a.data();
  std::vector<T> out(x.size());
  const T slope = static_cast<T>(kLeakySlope);
  switch (op) {
    case UnaryOp::exp:
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::exp(x[i]);
      break;
    case UnaryOp::log:
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::log(x[i]);
      break;
    case UnaryOp::tanh:
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::tanh(x[i]);
      break;
    case UnaryOp::sigmoid:
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-x[i]));
      break;
    case UnaryOp::relu:
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
      break;
    case UnaryOp::leaky_relu:
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T(0) ? x[i] : slope * x[i];
      break;
    case UnaryOp::abs:
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::abs(x[i]);
      break;
    case UnaryOp::square:
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * x[i];
      break;
    case UnaryOp::neg:
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = -x[i];
      break;
  }
  auto backward = [op, slope](Node<T>& self) {
    auto& in = input(self, 0);
    if (!in.requires_grad) return;
    const auto& g = self.grad;
    const auto& x = in.data;
    const auto& y = self.data;
    auto& gx = in.grad_buffer();
    const std::size_t n = g.size();
    switch (op) {
      case UnaryOp::exp:
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * y[i];
        break;
      case UnaryOp::log:
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] / x[i];
        break;
      case UnaryOp::tanh:
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * (T(1) - y[i] * y[i]);
        break;
      case UnaryOp::sigmoid:
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * y[i] * (T(1) - y[i]);
        break;
      case UnaryOp::relu:
        for (std::size_t i = 0; i < n; ++i) gx[i] += x[i] > T(0) ? g[i] : T(0);
        break;
      case UnaryOp::leaky_relu:
        for (std::size_t i = 0; i < n; ++i) gx[i] += x[i] > T(0) ? g[i] : slope * g[i];
        break;
      case UnaryOp::abs:
        for (std::size_t i = 0; i < n; ++i) {
          const T s = x[i] > T(0) ? T(1) : (x[i] < T(0) ? T(-1) : T(0));
          gx[i] += g[i] * s;
        }
        break;
      case UnaryOp::square:
        for (std::size_t i = 0; i < n; ++i) gx[i] += T(2) * x[i] * g[i];
        break;
      case UnaryOp::neg:
        for (std::size_t i = 0; i < n; ++i) gx[i] -= g[i];
        break;
    }
  };
  return Tensor<T>::make_result(a.shape(), std::move(out), {a}, backward, "unary");
}

template <typename T>
Tensor<T> elementwise(BinaryOp op, const Tensor<T>& a, const Tensor<T>& b) {
  const bool a_scalar = a.numel() == 1;
  const bool b_scalar = b.numel() == 1;
  if (a.shape() != b.shape() && !a_scalar && !b_scalar) {
    throw ShapeError("elementwise shape mismatch: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const Shape out_shape = (a.shape() == b.shape() || b_scalar) ? a.shape() : b.shape();
  const auto n = static_cast<std::size_t>(shape_numel(out_shape));
  const auto x = a.data();
  const auto y = b.data();
  const std::size_t sa = a_scalar ? 0 : 1;
  const std::size_t sb = b_scalar ? 0 : 1;
  std::vector<T> out(n);
  switch (op) {
    case BinaryOp::add:
      for (std::size_t i = 0; i < n; ++i) out[i] = x[i * sa] + y[i * sb];
      break;
    case BinaryOp::sub:
      for (std::size_t i = 0; i < n; ++i) out[i] = x[i * sa] - y[i * sb];
      break;
    case BinaryOp::mul:
      for (std::size_t i = 0; i < n; ++i) out[i] = x[i * sa] * y[i * sb];
      break;
    case BinaryOp::div:
      for (std::size_t i = 0; i < n; ++i) out[i] = x[i * sa] / y[i * sb];
      break;
  }
  auto backward = [op, sa, sb](Node<T>& self) {
    auto& na = input(self, 0);
    auto& nb = input(self, 1);
    const auto& g = self.grad;
    const auto& x = na.data;
    const auto& y = nb.data;
    const std::size_t n = g.size();
    if (na.requires_grad) {
      auto& ga = na.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        T d = g[i];
        if (op == BinaryOp::mul) d = g[i] * y[i * sb];
        if (op == BinaryOp::div) d = g[i] / y[i * sb];
        ga[i * sa] += d;
      }
    }
    if (nb.requires_grad) {
      auto& gb = nb.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        T d = g[i];
        if (op == BinaryOp::sub) d = -g[i];
        if (op == BinaryOp::mul) d = g[i] * x[i * sa];
        if (op == BinaryOp::div) {
          const T yi = y[i * sb];
          d = -g[i] * x[i * sa] / (yi * yi);
        }
        gb[i * sb] += d;
      }
    }
  };
  return Tensor<T>::make_result(out_shape, std::move(out), {a, b}, backward, "binary");
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T value) {
  const auto x = a.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + value;
  auto backward = [](Node<T>& self) {
    auto& in = input(self, 0);
    if (!in.requires_grad) return;
    auto& gx = in.grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  };
  return Tensor<T>::make_result(a.shape(), std::move(out), {a}, backward, "add_scalar");
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T value) {
  const auto x = a.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * value;
  auto backward = [value](Node<T>& self) {
    auto& in = input(self, 0);
    if (!in.requires_grad) return;
    auto& gx = in.grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * value;
  };
  return Tensor<T>::make_result(a.shape(), std::move(out), {a}, backward, "mul_scalar");
}

// ---------------------------------------------------------------------------
// Reductions and reshapes

template <typename T>
Tensor<T> reduce(ReduceOp op, const Tensor<T>& x, const std::vector<int>& axes, bool keepdim) {
  const Shape& in_shape = x.shape();
  const int rank = static_cast<int>(in_shape.size());
  std::vector<bool> reduced(in_shape.size(), axes.empty());
  for (int axis : axes) {
    const int a = axis < 0 ? axis + rank : axis;
    if (a < 0 || a >= rank) {
      throw ShapeError("reduce: invalid axis " + std::to_string(axis) + " for shape " +
                       shape_str(in_shape));
    }
    reduced[static_cast<std::size_t>(a)] = true;
  }

  Shape kept_shape;  // same rank as input, 1 on reduced axes
  Shape out_shape;
  std::int64_t count = 1;
  for (int i = 0; i < rank; ++i) {
    const auto d = in_shape[static_cast<std::size_t>(i)];
    if (reduced[static_cast<std::size_t>(i)]) {
      kept_shape.push_back(1);
      count *= d;
      if (keepdim) out_shape.push_back(1);
    } else {
      kept_shape.push_back(d);
      out_shape.push_back(d);
    }
  }
  if (out_shape.empty()) out_shape.push_back(1);

  // Map each input flat index to its output flat index.
  const auto n_in = static_cast<std::size_t>(x.numel());
  auto index_map = std::make_shared<std::vector<std::size_t>>(n_in);
  {
    std::vector<std::int64_t> out_strides(static_cast<std::size_t>(rank), 0);
    std::int64_t stride = 1;
    for (int i = rank - 1; i >= 0; --i) {
      out_strides[static_cast<std::size_t>(i)] = stride;
      stride *= kept_shape[static_cast<std::size_t>(i)];
    }
    std::vector<std::int64_t> idx(static_cast<std::size_t>(rank), 0);
    for (std::size_t flat = 0; flat < n_in; ++flat) {
      std::int64_t o = 0;
      for (int i = 0; i < rank; ++i) {
        if (!reduced[static_cast<std::size_t>(i)]) {
          o += idx[static_cast<std::size_t>(i)] * out_strides[static_cast<std::size_t>(i)];
        }
      }
      (*index_map)[flat] = static_cast<std::size_t>(o);
      for (int i = rank - 1; i >= 0; --i) {
        auto& v = idx[static_cast<std::size_t>(i)];
        if (++v < in_shape[static_cast<std::size_t>(i)]) break;
        v = 0;
      }
    }
  }

  const auto src = x.data();
  std::vector<T> out(static_cast<std::size_t>(shape_numel(out_shape)), T(0));
  for (std::size_t i = 0; i < n_in; ++i) out[(*index_map)[i]] += src[i];
  const T scale = op == ReduceOp::mean && count > 0 ? T(1) / static_cast<T>(count) : T(1);
  if (op == ReduceOp::mean) {
    for (auto& v : out) v = count > 0 ? v / static_cast<T>(count) : T(0);
  }
  auto backward = [index_map, scale](Node<T>& self) {
    auto& in = input(self, 0);
    if (!in.requires_grad) return;
    auto& gx = in.grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[(*index_map)[i]] * scale;
  };
  return Tensor<T>::make_result(out_shape, std::move(out), {x}, backward,
                                op == ReduceOp::sum ? "sum" : "mean");
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  const auto src = x.data();
  std::vector<T> out(src.begin(), src.end());
  auto backward = [](Node<T>& self) {
    auto& in = input(self, 0);
    if (!in.requires_grad) return;
    auto& gx = in.grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  };
  return Tensor<T>::make_result(std::move(shape), std::move(out), {x}, backward, "reshape");
}

// ---------------------------------------------------------------------------
// Convolutions

namespace {

struct ConvGeometry {
  std::int64_t batch, channels, height, width;  // the "image" side
  std::int64_t kernel, stride, pad;
  std::int64_t out_h, out_w;                    // the "patch grid" side

  std::int64_t rows() const { return channels * kernel * kernel; }
  std::int64_t cols() const { return batch * out_h * out_w; }
};

// cols[(c*K + ki)*K + kj][b*Ho*Wo + oy*Wo + ox] = img[b, c, oy*s - p + ki, ox*s - p + kj]
template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* cols) {
  const std::int64_t hw_out = g.out_h * g.out_w;
  const std::int64_t ncols = g.cols();
  parallel_for(g.batch, [&](std::int64_t b0, std::int64_t b1) {
    for (std::int64_t b = b0; b < b1; ++b) {
      for (std::int64_t c = 0; c < g.channels; ++c) {
        const T* plane = img + (b * g.channels + c) * g.height * g.width;
        for (std::int64_t ki = 0; ki < g.kernel; ++ki) {
          for (std::int64_t kj = 0; kj < g.kernel; ++kj) {
            T* row = cols + ((c * g.kernel + ki) * g.kernel + kj) * ncols + b * hw_out;
            for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
              const std::int64_t iy = oy * g.stride - g.pad + ki;
              T* dst = row + oy * g.out_w;
              if (iy < 0 || iy >= g.height) {
                std::fill(dst, dst + g.out_w, T(0));
                continue;
              }
              const T* src_row = plane + iy * g.width;
              for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
                const std::int64_t ix = ox * g.stride - g.pad + kj;
                dst[ox] = (ix >= 0 && ix < g.width) ? src_row[ix] : T(0);
              }
            }
          }
        }
      }
    }
  });
}

// Adjoint of im2col: scatter-adds patch columns back into the image.
template <typename T>
void col2im(const T* cols, const ConvGeometry& g, T* img) {
  const std::int64_t hw_out = g.out_h * g.out_w;
  const std::int64_t ncols = g.cols();
  parallel_for(g.batch, [&](std::int64_t b0, std::int64_t b1) {
    for (std::int64_t b = b0; b < b1; ++b) {
      for (std::int64_t c = 0; c < g.channels; ++c) {
        T* plane = img + (b * g.channels + c) * g.height * g.width;
        for (std::int64_t ki = 0; ki < g.kernel; ++ki) {
          for (std::int64_t kj = 0; kj < g.kernel; ++kj) {
            const T* row = cols + ((c * g.kernel + ki) * g.kernel + kj) * ncols + b * hw_out;
            for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
              const std::int64_t iy = oy * g.stride - g.pad + ki;
              if (iy < 0 || iy >= g.height) continue;
              const T* src = row + oy * g.out_w;
              T* dst_row = plane + iy * g.width;
              for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
                const std::int64_t ix = ox * g.stride - g.pad + kj;
                if (ix >= 0 && ix < g.width) dst_row[ix] += src[ox];
              }
            }
          }
        }
      }
    }
  });
}

// [B, C, HW] <-> [C, B*HW]
template <typename T>
void batch_to_channel_major(const T* src, std::int64_t B, std::int64_t C, std::int64_t HW,
                            T* dst) {
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c)
      std::copy(src + (b * C + c) * HW, src + (b * C + c + 1) * HW, dst + c * B * HW + b * HW);
}

template <typename T>
void channel_major_to_batch(const T* src, std::int64_t B, std::int64_t C, std::int64_t HW,
                            T* dst) {
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c)
      std::copy(src + c * B * HW + b * HW, src + c * B * HW + (b + 1) * HW, dst + (b * C + c) * HW);
}

void check_conv_args(int stride, int pad) {
  if (stride < 1) throw ShapeError("convolution stride must be >= 1, got " + std::to_string(stride));
  if (pad < 0) throw ShapeError("convolution pad must be >= 0, got " + std::to_string(pad));
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride,
                 int pad) {
  check_conv_args(stride, pad);
  require_rank4(x.shape(), "conv2d input");
  require_rank4(w.shape(), "conv2d weight");
  const auto B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto O = w.dim(0), K = w.dim(2);
  if (w.dim(1) != C) {
    throw ShapeError("conv2d channel mismatch: input " + shape_str(x.shape()) + " vs weight " +
                     shape_str(w.shape()));
  }
  if (w.dim(3) != K) throw ShapeError("conv2d expects square kernels, got " + shape_str(w.shape()));
  if (bias.defined() && bias.numel() != O) {
    throw ShapeError("conv2d bias " + shape_str(bias.shape()) + " does not match " +
                     std::to_string(O) + " output channels");
  }
  const auto Ho = (H + 2 * pad - K) / stride + 1;
  const auto Wo = (W + 2 * pad - K) / stride + 1;
  if (H + 2 * pad < K || W + 2 * pad < K) {
    throw ShapeError("conv2d kernel " + std::to_string(K) + " larger than padded input " +
                     shape_str(x.shape()));
  }
  const ConvGeometry g{B, C, H, W, K, stride, pad, Ho, Wo};
  auto cols = std::make_shared<std::vector<T>>(static_cast<std::size_t>(g.rows() * g.cols()));
  im2col(x.data().data(), g, cols->data());

  const std::int64_t hw = Ho * Wo;
  std::vector<T> out_cm(static_cast<std::size_t>(O * g.cols()));
  {
    ConstMatMap<T> wm(w.data().data(), O, g.rows());
    ConstMatMap<T> cm(cols->data(), g.rows(), g.cols());
    MatMap<T> om(out_cm.data(), O, g.cols());
    om.noalias() = wm * cm;
  }
  if (bias.defined()) {
    const auto bd = bias.data();
    for (std::int64_t o = 0; o < O; ++o) {
      T* row = out_cm.data() + o * g.cols();
      for (std::int64_t j = 0; j < g.cols(); ++j) row[j] += bd[static_cast<std::size_t>(o)];
    }
  }
  std::vector<T> out(out_cm.size());
  channel_major_to_batch(out_cm.data(), B, O, hw, out.data());

  const bool has_bias = bias.defined();
  auto backward = [g, O, hw, cols, has_bias](Node<T>& self) {
    auto& nx = input(self, 0);
    auto& nw = input(self, 1);
    std::vector<T> gout(self.grad.size());
    batch_to_channel_major(self.grad.data(), g.batch, O, hw, gout.data());
    ConstMatMap<T> gm(gout.data(), O, g.cols());
    if (nw.requires_grad) {
      ConstMatMap<T> cm(cols->data(), g.rows(), g.cols());
      RowMat<T> gw = gm * cm.transpose();
      auto& gwb = nw.grad_buffer();
      for (std::size_t i = 0; i < gwb.size(); ++i) gwb[i] += gw.data()[i];
    }
    if (has_bias) {
      auto& nb = input(self, 2);
      if (nb.requires_grad) {
        auto& gb = nb.grad_buffer();
        for (std::int64_t o = 0; o < O; ++o) {
          T acc = T(0);
          const T* row = gout.data() + o * g.cols();
          for (std::int64_t j = 0; j < g.cols(); ++j) acc += row[j];
          gb[static_cast<std::size_t>(o)] += acc;
        }
      }
    }
    if (nx.requires_grad) {
      ConstMatMap<T> wm(nw.data.data(), O, g.rows());
      RowMat<T> gcols = wm.transpose() * gm;
      col2im(gcols.data(), g, nx.grad_buffer().data());
    }
  };
  std::vector<Tensor<T>> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return Tensor<T>::make_result(Shape{B, O, Ho, Wo}, std::move(out), inputs, backward, "conv2d");
}

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                           int stride, int pad) {
  check_conv_args(stride, pad);
  require_rank4(x.shape(), "conv_transpose2d input");
  require_rank4(w.shape(), "conv_transpose2d weight");
  const auto B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto Co = w.dim(1), K = w.dim(2);
  if (w.dim(0) != Ci) {
    throw ShapeError("conv_transpose2d channel mismatch: input " + shape_str(x.shape()) +
                     " vs weight " + shape_str(w.shape()));
  }
  if (w.dim(3) != K) {
    throw ShapeError("conv_transpose2d expects square kernels, got " + shape_str(w.shape()));
  }
  if (bias.defined() && bias.numel() != Co) {
    throw ShapeError("conv_transpose2d bias " + shape_str(bias.shape()) + " does not match " +
                     std::to_string(Co) + " output channels");
  }
  const auto Ho = (H - 1) * stride - 2 * pad + K;
  const auto Wo = (W - 1) * stride - 2 * pad + K;
  if (Ho <= 0 || Wo <= 0) {
    throw ShapeError("conv_transpose2d produces empty output for input " + shape_str(x.shape()));
  }
  // The output plays the role of a conv2d input whose patch grid is H x W.
  const ConvGeometry g{B, Co, Ho, Wo, K, stride, pad, H, W};
  const std::int64_t hw = H * W;
  auto xcm = std::make_shared<std::vector<T>>(static_cast<std::size_t>(Ci * B * hw));
  batch_to_channel_major(x.data().data(), B, Ci, hw, xcm->data());

  RowMat<T> cols;
  {
    ConstMatMap<T> wm(w.data().data(), Ci, g.rows());
    ConstMatMap<T> xm(xcm->data(), Ci, g.cols());
    cols.noalias() = wm.transpose() * xm;
  }
  std::vector<T> out(static_cast<std::size_t>(B * Co * Ho * Wo), T(0));
  col2im(cols.data(), g, out.data());
  if (bias.defined()) {
    const auto bd = bias.data();
    const std::int64_t plane = Ho * Wo;
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t c = 0; c < Co; ++c) {
        T* p = out.data() + (b * Co + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) p[i] += bd[static_cast<std::size_t>(c)];
      }
  }

  const bool has_bias = bias.defined();
  auto backward = [g, Ci, hw, xcm, has_bias](Node<T>& self) {
    auto& nx = input(self, 0);
    auto& nw = input(self, 1);
    std::vector<T> gcols(static_cast<std::size_t>(g.rows() * g.cols()));
    im2col(self.grad.data(), g, gcols.data());
    ConstMatMap<T> gc(gcols.data(), g.rows(), g.cols());
    if (nw.requires_grad) {
      ConstMatMap<T> xm(xcm->data(), Ci, g.cols());
      RowMat<T> gw = xm * gc.transpose();
      auto& gwb = nw.grad_buffer();
      for (std::size_t i = 0; i < gwb.size(); ++i) gwb[i] += gw.data()[i];
    }
    if (has_bias) {
      auto& nb = input(self, 2);
      if (nb.requires_grad) {
        auto& gb = nb.grad_buffer();
        const std::int64_t plane = g.height * g.width;
        for (std::int64_t c = 0; c < g.channels; ++c) {
          T acc = T(0);
          for (std::int64_t b = 0; b < g.batch; ++b) {
            const T* p = self.grad.data() + (b * g.channels + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) acc += p[i];
          }
          gb[static_cast<std::size_t>(c)] += acc;
        }
      }
    }
    if (nx.requires_grad) {
      ConstMatMap<T> wm(nw.data.data(), Ci, g.rows());
      RowMat<T> gx = wm * gc;
      auto& gxb = nx.grad_buffer();
      std::vector<T> tmp(gxb.size());
      channel_major_to_batch(gx.data(), g.batch, Ci, hw, tmp.data());
      for (std::size_t i = 0; i < gxb.size(); ++i) gxb[i] += tmp[i];
    }
  };
  std::vector<Tensor<T>> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return Tensor<T>::make_result(Shape{B, Co, Ho, Wo}, std::move(out), inputs, backward,
                                "conv_transpose2d");
}

// ---------------------------------------------------------------------------
// Normalization and channel manipulation

template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, double eps) {
  require_rank4(x.shape(), "instance_norm");
  const auto B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const auto src = x.data();
  std::vector<T> out(src.size());
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(B * C));
  for (std::int64_t p = 0; p < B * C; ++p) {
    const T* v = src.data() + p * HW;
    T m = T(0);
    for (std::int64_t i = 0; i < HW; ++i) m += v[i];
    m /= static_cast<T>(HW);
    T var = T(0);
    for (std::int64_t i = 0; i < HW; ++i) var += (v[i] - m) * (v[i] - m);
    var /= static_cast<T>(HW);
    const T is = T(1) / std::sqrt(var + static_cast<T>(eps));
    (*inv_std)[static_cast<std::size_t>(p)] = is;
    T* o = out.data() + p * HW;
    for (std::int64_t i = 0; i < HW; ++i) o[i] = (v[i] - m) * is;
  }
  auto backward = [B, C, HW, inv_std](Node<T>& self) {
    auto& in = input(self, 0);
    if (!in.requires_grad) return;
    auto& gx = in.grad_buffer();
    const T n = static_cast<T>(HW);
    for (std::int64_t p = 0; p < B * C; ++p) {
      const T* g = self.grad.data() + p * HW;
      const T* xhat = self.data.data() + p * HW;
      T sum_g = T(0), sum_gx = T(0);
      for (std::int64_t i = 0; i < HW; ++i) {
        sum_g += g[i];
        sum_gx += g[i] * xhat[i];
      }
      const T is = (*inv_std)[static_cast<std::size_t>(p)];
      T* d = gx.data() + p * HW;
      for (std::int64_t i = 0; i < HW; ++i) {
        d[i] += is * (g[i] - sum_g / n - xhat[i] * sum_gx / n);
      }
    }
  };
  return Tensor<T>::make_result(x.shape(), std::move(out), {x}, backward, "instance_norm");
}

template <typename T>
Tensor<T> channel_affine(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift) {
  require_rank4(x.shape(), "channel_affine");
  const auto B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (scale.numel() != C || shift.numel() != C) {
    throw ShapeError("channel_affine: scale " + shape_str(scale.shape()) + " / shift " +
                     shape_str(shift.shape()) + " do not match input " + shape_str(x.shape()));
  }
  const auto src = x.data();
  const auto s = scale.data();
  const auto t = shift.data();
  std::vector<T> out(src.size());
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c) {
      const std::size_t base = static_cast<std::size_t>((b * C + c) * HW);
      const T sc = s[static_cast<std::size_t>(c)], sh = t[static_cast<std::size_t>(c)];
      for (std::int64_t i = 0; i < HW; ++i) out[base + i] = src[base + i] * sc + sh;
    }
  auto backward = [B, C, HW](Node<T>& self) {
    auto& nx = input(self, 0);
    auto& ns = input(self, 1);
    auto& nt = input(self, 2);
    const auto& g = self.grad;
    for (std::int64_t c = 0; c < C; ++c) {
      const T sc = ns.data[static_cast<std::size_t>(c)];
      T gs = T(0), gt = T(0);
      for (std::int64_t b = 0; b < B; ++b) {
        const std::size_t base = static_cast<std::size_t>((b * C + c) * HW);
        for (std::int64_t i = 0; i < HW; ++i) {
          gs += g[base + i] * nx.data[base + i];
          gt += g[base + i];
        }
        if (nx.requires_grad) {
          auto& gx = nx.grad_buffer();
          for (std::int64_t i = 0; i < HW; ++i) gx[base + i] += g[base + i] * sc;
        }
      }
      if (ns.requires_grad) ns.grad_buffer()[static_cast<std::size_t>(c)] += gs;
      if (nt.requires_grad) nt.grad_buffer()[static_cast<std::size_t>(c)] += gt;
    }
  };
  return Tensor<T>::make_result(x.shape(), std::move(out), {x, scale, shift}, backward,
                                "channel_affine");
}

namespace {

// Index permutation shared by space_to_depth and its inverse: perm[i] is the
// source offset (in the B x C x H x W input) of output element i.
std::shared_ptr<std::vector<std::size_t>> s2d_permutation(const Shape& s, int f) {
  const auto B = s[0], C = s[1], H = s[2], W = s[3];
  const auto Ho = H / f, Wo = W / f, Co = C * f * f;
  auto perm = std::make_shared<std::vector<std::size_t>>(static_cast<std::size_t>(B * C * H * W));
  std::size_t i = 0;
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t co = 0; co < Co; ++co) {
      const auto c = co / (f * f);
      const auto dy = (co % (f * f)) / f;
      const auto dx = co % f;
      for (std::int64_t y = 0; y < Ho; ++y)
        for (std::int64_t x = 0; x < Wo; ++x) {
          (*perm)[i++] = static_cast<std::size_t>(((b * C + c) * H + y * f + dy) * W + x * f + dx);
        }
    }
  return perm;
}

template <typename T>
Tensor<T> gather(const Tensor<T>& x, Shape out_shape,
                 std::shared_ptr<std::vector<std::size_t>> perm, const char* op) {
  const auto src = x.data();
  std::vector<T> out(perm->size());
  for (std::size_t i = 0; i < perm->size(); ++i) out[i] = src[(*perm)[i]];
  auto backward = [perm](Node<T>& self) {
    auto& in = input(self, 0);
    if (!in.requires_grad) return;
    auto& gx = in.grad_buffer();
    for (std::size_t i = 0; i < perm->size(); ++i) gx[(*perm)[i]] += self.grad[i];
  };
  return Tensor<T>::make_result(std::move(out_shape), std::move(out), {x}, backward, op);
}

template <typename T>
Tensor<T> scatter(const Tensor<T>& x, Shape out_shape,
                  std::shared_ptr<std::vector<std::size_t>> perm, const char* op) {
  const auto src = x.data();
  std::vector<T> out(perm->size());
  for (std::size_t i = 0; i < perm->size(); ++i) out[(*perm)[i]] = src[i];
  auto backward = [perm](Node<T>& self) {
    auto& in = input(self, 0);
    if (!in.requires_grad) return;
    auto& gx = in.grad_buffer();
    for (std::size_t i = 0; i < perm->size(); ++i) gx[i] += self.grad[(*perm)[i]];
  };
  return Tensor<T>::make_result(std::move(out_shape), std::move(out), {x}, backward, op);
}

}  // namespace

template <typename T>
Tensor<T> space_to_depth(const Tensor<T>& x, int factor) {
  require_rank4(x.shape(), "space_to_depth");
  if (factor < 1 || x.dim(2) % factor != 0 || x.dim(3) % factor != 0) {
    throw ShapeError("space_to_depth: spatial dims of " + shape_str(x.shape()) +
                     " not divisible by " + std::to_string(factor));
  }
  const Shape& s = x.shape();
  return gather(x, Shape{s[0], s[1] * factor * factor, s[2] / factor, s[3] / factor},
                s2d_permutation(s, factor), "space_to_depth");
}

template <typename T>
Tensor<T> depth_to_space(const Tensor<T>& x, int factor) {
  require_rank4(x.shape(), "depth_to_space");
  const auto ff = static_cast<std::int64_t>(factor) * factor;
  if (factor < 1 || x.dim(1) % ff != 0) {
    throw ShapeError("depth_to_space: channels of " + shape_str(x.shape()) +
                     " not divisible by " + std::to_string(ff));
  }
  const Shape& s = x.shape();
  Shape out{s[0], s[1] / ff, s[2] * factor, s[3] * factor};
  return scatter(x, out, s2d_permutation(out, factor), "depth_to_space");
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::int64_t begin, std::int64_t end) {
  require_rank4(x.shape(), "slice_channels");
  const auto B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (begin < 0 || end > C || begin >= end) {
    throw ShapeError("slice_channels: range [" + std::to_string(begin) + ", " +
                     std::to_string(end) + ") invalid for " + shape_str(x.shape()));
  }
  const auto Cs = end - begin;
  auto perm = std::make_shared<std::vector<std::size_t>>(static_cast<std::size_t>(B * Cs * HW));
  std::size_t i = 0;
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = begin; c < end; ++c)
      for (std::int64_t p = 0; p < HW; ++p)
        (*perm)[i++] = static_cast<std::size_t>((b * C + c) * HW + p);
  return gather(x, Shape{B, Cs, x.dim(2), x.dim(3)}, perm, "slice_channels");
}

template <typename T>
Tensor<T> reverse_channels(const Tensor<T>& x) {
  require_rank4(x.shape(), "reverse_channels");
  const auto B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  auto perm = std::make_shared<std::vector<std::size_t>>(static_cast<std::size_t>(B * C * HW));
  std::size_t i = 0;
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t p = 0; p < HW; ++p)
        (*perm)[i++] = static_cast<std::size_t>((b * C + (C - 1 - c)) * HW + p);
  return gather(x, x.shape(), perm, "reverse_channels");
}

template <typename T>
Tensor<T> crop_spatial(const Tensor<T>& x, int margin) {
  require_rank4(x.shape(), "crop_spatial");
  if (margin == 0) return x;
  const auto B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (margin < 0 || 2 * margin >= H || 2 * margin >= W) {
    throw ShapeError("crop_spatial: margin " + std::to_string(margin) + " invalid for " +
                     shape_str(x.shape()));
  }
  const auto Ho = H - 2 * margin, Wo = W - 2 * margin;
  auto perm = std::make_shared<std::vector<std::size_t>>(static_cast<std::size_t>(B * C * Ho * Wo));
  std::size_t i = 0;
  for (std::int64_t p = 0; p < B * C; ++p)
    for (std::int64_t y = 0; y < Ho; ++y)
      for (std::int64_t xx = 0; xx < Wo; ++xx)
        (*perm)[i++] = static_cast<std::size_t>((p * H + y + margin) * W + xx + margin);
  return gather(x, Shape{B, C, Ho, Wo}, perm, "crop_spatial");
}

template <typename T>
Tensor<T> spatial_diff(const Tensor<T>& x, int axis) {
  require_rank4(x.shape(), "spatial_diff");
  if (axis != 2 && axis != 3) throw ShapeError("spatial_diff: axis must be 2 or 3");
  const auto B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto Ho = axis == 2 ? H - 1 : H, Wo = axis == 3 ? W - 1 : W;
  if (Ho < 1 || Wo < 1) throw ShapeError("spatial_diff: axis too short in " + shape_str(x.shape()));
  const std::int64_t step = axis == 2 ? W : 1;
  const auto src = x.data();
  std::vector<T> out(static_cast<std::size_t>(B * C * Ho * Wo));
  std::size_t i = 0;
  for (std::int64_t p = 0; p < B * C; ++p)
    for (std::int64_t y = 0; y < Ho; ++y)
      for (std::int64_t xx = 0; xx < Wo; ++xx, ++i) {
        const auto k = (p * H + y) * W + xx;
        out[i] = src[static_cast<std::size_t>(k + step)] - src[static_cast<std::size_t>(k)];
      }
  auto backward = [B, C, H, W, Ho, Wo, step](Node<T>& self) {
    auto& in = *self.inputs[0];
    auto& gx = in.grad_buffer();
    std::size_t i = 0;
    for (std::int64_t p = 0; p < B * C; ++p)
      for (std::int64_t y = 0; y < Ho; ++y)
        for (std::int64_t xx = 0; xx < Wo; ++xx, ++i) {
          const auto k = (p * H + y) * W + xx;
          gx[static_cast<std::size_t>(k + step)] += self.grad[i];
          gx[static_cast<std::size_t>(k)] -= self.grad[i];
        }
  };
  return Tensor<T>::make_result(Shape{B, C, Ho, Wo}, std::move(out), {x}, backward,
                                "spatial_diff");
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  for (const auto& p : parts) require_rank4(p.shape(), "concat_channels");
  const auto B = parts[0].dim(0), H = parts[0].dim(2), W = parts[0].dim(3);
  std::int64_t C = 0;
  for (const auto& p : parts) {
    if (p.dim(0) != B || p.dim(2) != H || p.dim(3) != W) {
      throw ShapeError("concat_channels: incompatible shapes " + shape_str(parts[0].shape()) +
                       " and " + shape_str(p.shape()));
    }
    C += p.dim(1);
  }
  const auto HW = H * W;
  std::vector<T> out(static_cast<std::size_t>(B * C * HW));
  auto offsets = std::make_shared<std::vector<std::int64_t>>();
  std::int64_t c0 = 0;
  for (const auto& p : parts) {
    offsets->push_back(c0);
    const auto src = p.data();
    const auto Cp = p.dim(1);
    for (std::int64_t b = 0; b < B; ++b)
      std::copy(src.begin() + b * Cp * HW, src.begin() + (b + 1) * Cp * HW,
                out.begin() + (b * C + c0) * HW);
    c0 += Cp;
  }
  auto backward = [B, C, HW, offsets](Node<T>& self) {
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      auto& in = *self.inputs[k];
      if (!in.requires_grad) continue;
      auto& gx = in.grad_buffer();
      const auto Cp = in.shape[1];
      const auto c0 = (*offsets)[k];
      for (std::int64_t b = 0; b < B; ++b) {
        const T* g = self.grad.data() + (b * C + c0) * HW;
        T* d = gx.data() + b * Cp * HW;
        for (std::int64_t i = 0; i < Cp * HW; ++i) d[i] += g[i];
      }
    }
  };
  return Tensor<T>::make_result(Shape{B, C, H, W}, std::move(out), parts, backward,
                                "concat_channels");
}

#define FLOWREG_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> elementwise(UnaryOp, const Tensor<T>&);                                    \
  template Tensor<T> elementwise(BinaryOp, const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                           \
  template Tensor<T> mul_scalar(const Tensor<T>&, T);                                           \
  template Tensor<T> reduce(ReduceOp, const Tensor<T>&, const std::vector<int>&, bool);         \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                          \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);    \
  template Tensor<T> conv_transpose2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, \
                                      int);                                                     \
  template Tensor<T> instance_norm(const Tensor<T>&, double);                                   \
  template Tensor<T> channel_affine(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);      \
  template Tensor<T> space_to_depth(const Tensor<T>&, int);                                     \
  template Tensor<T> depth_to_space(const Tensor<T>&, int);                                     \
  template Tensor<T> slice_channels(const Tensor<T>&, std::int64_t, std::int64_t);              \
  template Tensor<T> concat_channels(const std::vector<Tensor<T>>&);                            \
  template Tensor<T> reverse_channels(const Tensor<T>&);                                        \
  template Tensor<T> crop_spatial(const Tensor<T>&, int);                                       \
  template Tensor<T> spatial_diff(const Tensor<T>&, int);

FLOWREG_INSTANTIATE_OPS(float)
FLOWREG_INSTANTIATE_OPS(double)

#undef FLOWREG_INSTANTIATE_OPS

}  // namespace flowreg
