#include "flowreg/warp.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "flowreg/ops.hpp"

namespace flowreg {

namespace {

template <typename T>
struct Sample {
  std::int64_t x0, x1, y0, y1;
  T wx, wy;
  bool free_x, free_y;  // false where the coordinate was clamped
};

template <typename T>
Sample<T> locate(T sx, T sy, std::int64_t H, std::int64_t W) {
  Sample<T> s{};
  const T max_x = static_cast<T>(W - 1), max_y = static_cast<T>(H - 1);
  s.free_x = sx >= T(0) && sx <= max_x;
  s.free_y = sy >= T(0) && sy <= max_y;
  sx = std::clamp(sx, T(0), max_x);
  sy = std::clamp(sy, T(0), max_y);
  s.x0 = static_cast<std::int64_t>(std::floor(sx));
  s.y0 = static_cast<std::int64_t>(std::floor(sy));
  s.x1 = std::min(s.x0 + 1, W - 1);
  s.y1 = std::min(s.y0 + 1, H - 1);
  s.wx = sx - static_cast<T>(s.x0);
  s.wy = sy - static_cast<T>(s.y0);
  return s;
}

template <typename T>
T interpolate(const T* plane, std::int64_t W, const Sample<T>& s) {
  const T v00 = plane[s.y0 * W + s.x0];
  if (s.wx == T(0) && s.wy == T(0)) return v00;
  const T v01 = plane[s.y0 * W + s.x1];
  const T v10 = plane[s.y1 * W + s.x0];
  const T v11 = plane[s.y1 * W + s.x1];
  const T top = s.wx == T(0) ? v00 : (T(1) - s.wx) * v00 + s.wx * v01;
  if (s.wy == T(0)) return top;
  const T bottom = s.wx == T(0) ? v10 : (T(1) - s.wx) * v10 + s.wx * v11;
  return (T(1) - s.wy) * top + s.wy * bottom;
}

}  // namespace

template <typename T>
Tensor<T> warp(const Tensor<T>& img, const Tensor<T>& phi) {
  if (img.rank() != 4 || phi.rank() != 4 || phi.dim(1) != 2 || phi.dim(0) != img.dim(0) ||
      phi.dim(2) != img.dim(2) || phi.dim(3) != img.dim(3)) {
    throw ShapeError("warp: image " + shape_str(img.shape()) + " and field " +
                     shape_str(phi.shape()) + " must be B x C x H x W and B x 2 x H x W");
  }
  const auto B = img.dim(0), C = img.dim(1), H = img.dim(2), W = img.dim(3);
  const auto HW = H * W;
  const auto src = img.data();
  const auto field = phi.data();
  std::vector<T> out(static_cast<std::size_t>(B * C * HW));
  for (std::int64_t b = 0; b < B; ++b) {
    const T* fx = field.data() + (b * 2) * HW;
    const T* fy = fx + HW;
    for (std::int64_t y = 0; y < H; ++y)
      for (std::int64_t x = 0; x < W; ++x) {
        const auto p = y * W + x;
        const auto s = locate(static_cast<T>(x) + fx[p], static_cast<T>(y) + fy[p], H, W);
        for (std::int64_t c = 0; c < C; ++c) {
          const auto plane = (b * C + c) * HW;
          out[static_cast<std::size_t>(plane + p)] = interpolate(src.data() + plane, W, s);
        }
      }
  }
  auto backward = [B, C, H, W, HW](detail::Node<T>& self) {
    auto& in_img = *self.inputs[0];
    auto& in_phi = *self.inputs[1];
    const T* src = in_img.data.data();
    const T* field = in_phi.data.data();
    T* gimg = in_img.requires_grad ? in_img.grad_buffer().data() : nullptr;
    T* gphi = in_phi.requires_grad ? in_phi.grad_buffer().data() : nullptr;
    for (std::int64_t b = 0; b < B; ++b) {
      const T* fx = field + (b * 2) * HW;
      const T* fy = fx + HW;
      for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t x = 0; x < W; ++x) {
          const auto p = y * W + x;
          const auto s = locate(static_cast<T>(x) + fx[p], static_cast<T>(y) + fy[p], H, W);
          T dx = T(0), dy = T(0);
          for (std::int64_t c = 0; c < C; ++c) {
            const auto plane = (b * C + c) * HW;
            const T g = self.grad[static_cast<std::size_t>(plane + p)];
            if (gimg != nullptr) {
              T* gi = gimg + plane;
              gi[s.y0 * W + s.x0] += g * (T(1) - s.wx) * (T(1) - s.wy);
              gi[s.y0 * W + s.x1] += g * s.wx * (T(1) - s.wy);
              gi[s.y1 * W + s.x0] += g * (T(1) - s.wx) * s.wy;
              gi[s.y1 * W + s.x1] += g * s.wx * s.wy;
            }
            if (gphi != nullptr) {
              const T* v = src + plane;
              const T v00 = v[s.y0 * W + s.x0], v01 = v[s.y0 * W + s.x1];
              const T v10 = v[s.y1 * W + s.x0], v11 = v[s.y1 * W + s.x1];
              dx += g * ((T(1) - s.wy) * (v01 - v00) + s.wy * (v11 - v10));
              dy += g * ((T(1) - s.wx) * (v10 - v00) + s.wx * (v11 - v01));
            }
          }
          if (gphi != nullptr) {
            if (s.free_x) gphi[(b * 2) * HW + p] += dx;
            if (s.free_y) gphi[(b * 2 + 1) * HW + p] += dy;
          }
        }
    }
  };
  return Tensor<T>::make_result(img.shape(), std::move(out), {img, phi}, backward, "warp");
}

template <typename T>
Tensor<T> smoothness(const Tensor<T>& phi) {
  auto dx = spatial_diff(phi, 3);
  auto dy = spatial_diff(phi, 2);
  const T count = static_cast<T>(dx.numel() + dy.numel());
  return mul_scalar(sum(square(dx)) + sum(square(dy)), T(1) / count);
}

template <typename T>
RegistrationResult<T> registration_loss(const Tensor<T>& x_t, const Tensor<T>& x_k,
                                        const RegNet<T>& regnet, double w_smooth) {
  if (x_t.shape() != x_k.shape() || x_t.rank() != 4 || x_t.dim(1) != 1) {
    throw ShapeError("registration_loss: slices " + shape_str(x_t.shape()) + " and " +
                     shape_str(x_k.shape()) + " must both be B x 1 x H x W");
  }
  RegistrationResult<T> r;
  r.phi = regnet.forward(x_t, x_k);
  r.similarity = mean(square(x_t - warp(x_k, r.phi)));
  r.smoothness = smoothness(r.phi);
  r.loss = r.similarity + mul_scalar(r.smoothness, static_cast<T>(w_smooth));
  return r;
}

#define FLOWREG_INSTANTIATE_WARP(T)                                   \
  template Tensor<T> warp(const Tensor<T>&, const Tensor<T>&);        \
  template Tensor<T> smoothness(const Tensor<T>&);                    \
  template RegistrationResult<T> registration_loss(const Tensor<T>&, const Tensor<T>&, \
                                                   const RegNet<T>&, double);

FLOWREG_INSTANTIATE_WARP(float)
FLOWREG_INSTANTIATE_WARP(double)

#undef FLOWREG_INSTANTIATE_WARP

}  // namespace flowreg
