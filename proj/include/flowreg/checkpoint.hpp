#pragma once

// Binary checkpoint container.
//
// Layout (little-endian): "FLWR", u32 version, u32 entry count, then per
// entry u16 name length, name bytes, u8 dtype (0 = f32, 1 = f64), u8 rank,
// u32 dims[rank], payload; a trailing u32 CRC-32 covers every preceding byte.

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "flowreg/nn.hpp"
#include "flowreg/tensor.hpp"

namespace flowreg {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class CheckpointErrorKind { io, bad_magic, unsupported_version, truncated, crc_mismatch, format };

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(CheckpointErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}
  CheckpointErrorKind kind() const { return kind_; }

 private:
  CheckpointErrorKind kind_;
};

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <typename T>
constexpr DType dtype_of() {
  return sizeof(T) == 4 ? DType::f32 : DType::f64;
}

struct CheckpointEntry {
  std::string name;
  DType dtype = DType::f64;
  Shape shape;
  std::vector<double> values;  // f32 entries hold exactly representable values
};

class Checkpoint {
 public:
  void add(std::string name, DType dtype, Shape shape, std::vector<double> values);
  template <typename T>
  void add_tensor(std::string name, const Tensor<T>& t);
  void add_scalar(std::string name, double value) { add(std::move(name), DType::f64, {1}, {value}); }
  template <typename T>
  void add_registry(const ParameterRegistry<T>& r);

  const std::vector<CheckpointEntry>& entries() const { return entries_; }
  const CheckpointEntry* find(std::string_view name) const;
  const CheckpointEntry& at(std::string_view name) const;
  double scalar(std::string_view name) const;
  double scalar_or(std::string_view name, double fallback) const;

  // Copies a stored entry into an existing tensor of the same shape.
  template <typename T>
  void load_into(std::string_view name, Tensor<T>& t) const;
  template <typename T>
  void load_registry(const ParameterRegistry<T>& r) const;

  std::vector<std::uint8_t> to_bytes() const;
  static Checkpoint from_bytes(std::span<const std::uint8_t> bytes);

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

 private:
  std::vector<CheckpointEntry> entries_;
};

}  // namespace flowreg
