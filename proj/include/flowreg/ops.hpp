#pragma once

// Differentiable tensor operations. Binary elementwise ops accept equal
// shapes or a single-element operand broadcast against the other side.

#include <cstdint>
#include <vector>

#include "flowreg/tensor.hpp"

namespace flowreg {

inline constexpr double kLeakySlope = 0.2;

enum class UnaryOp { exp, log, tanh, sigmoid, relu, leaky_relu, abs, square, neg };
enum class BinaryOp { add, sub, mul, div };
enum class ReduceOp { sum, mean };

template <typename T>
Tensor<T> elementwise(UnaryOp op, const Tensor<T>& a);
template <typename T>
Tensor<T> elementwise(BinaryOp op, const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryOp::add, a, b); }
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryOp::sub, a, b); }
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryOp::mul, a, b); }
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryOp::div, a, b); }

template <typename T> Tensor<T> exp(const Tensor<T>& a) { return elementwise(UnaryOp::exp, a); }
template <typename T> Tensor<T> log(const Tensor<T>& a) { return elementwise(UnaryOp::log, a); }
template <typename T> Tensor<T> tanh(const Tensor<T>& a) { return elementwise(UnaryOp::tanh, a); }
template <typename T> Tensor<T> sigmoid(const Tensor<T>& a) { return elementwise(UnaryOp::sigmoid, a); }
template <typename T> Tensor<T> relu(const Tensor<T>& a) { return elementwise(UnaryOp::relu, a); }
template <typename T> Tensor<T> leaky_relu(const Tensor<T>& a) { return elementwise(UnaryOp::leaky_relu, a); }
template <typename T> Tensor<T> abs(const Tensor<T>& a) { return elementwise(UnaryOp::abs, a); }
template <typename T> Tensor<T> square(const Tensor<T>& a) { return elementwise(UnaryOp::square, a); }
template <typename T> Tensor<T> neg(const Tensor<T>& a) { return elementwise(UnaryOp::neg, a); }

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T value);
template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T value);

template <typename T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T> Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a) { return neg(a); }
template <typename T> Tensor<T> operator+(const Tensor<T>& a, T s) { return add_scalar(a, s); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, T s) { return add_scalar(a, -s); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, T s) { return mul_scalar(a, s); }
template <typename T> Tensor<T> operator*(T s, const Tensor<T>& a) { return mul_scalar(a, s); }

// Empty `axes` reduces over everything and yields shape [1].
template <typename T>
Tensor<T> reduce(ReduceOp op, const Tensor<T>& x, const std::vector<int>& axes = {},
                 bool keepdim = false);
template <typename T> Tensor<T> sum(const Tensor<T>& x, const std::vector<int>& axes = {}) { return reduce(ReduceOp::sum, x, axes); }
template <typename T> Tensor<T> mean(const Tensor<T>& x, const std::vector<int>& axes = {}) { return reduce(ReduceOp::mean, x, axes); }

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

// x: B x I x H x W, w: O x I x K x K, bias: O (may be undefined).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride,
                 int pad);

// Adjoint of conv2d. x: B x I x H x W, w: I x O x K x K, bias: O (may be
// undefined). Output spatial size (H - 1) * stride - 2 * pad + K.
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                           int stride, int pad);

// Per-(sample, channel) normalization over H x W, no affine part.
template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, double eps = 1e-5);

// y[b,c,h,w] = x[b,c,h,w] * scale[c] + shift[c].
template <typename T>
Tensor<T> channel_affine(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift);

// B x C x H x W -> B x (C*f*f) x (H/f) x (W/f); output channel c*f*f + dy*f + dx.
template <typename T>
Tensor<T> space_to_depth(const Tensor<T>& x, int factor);
template <typename T>
Tensor<T> depth_to_space(const Tensor<T>& x, int factor);

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::int64_t begin, std::int64_t end);
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts);
template <typename T>
Tensor<T> reverse_channels(const Tensor<T>& x);

// Drops `margin` pixels from every spatial border.
template <typename T>
Tensor<T> crop_spatial(const Tensor<T>& x, int margin);

// Forward differences x[..., i+1] - x[..., i] along axis 2 (rows) or 3
// (columns); that axis shrinks by one.
template <typename T>
Tensor<T> spatial_diff(const Tensor<T>& x, int axis);

}  // namespace flowreg
