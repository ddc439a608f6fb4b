#include "flowreg/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace flowreg {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'F', 'L', 'W', 'R'};

class Writer {
 public:
  template <typename U>
  void put(U v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(U));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes.insert(bytes.end(), p, p + n);
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}
  template <typename U>
  U get() {
    U v;
    std::memcpy(&v, take(sizeof(U)), sizeof(U));
    return v;
  }
  const std::uint8_t* take(std::size_t n) {
    if (pos_ + n > bytes_.size()) {
      throw CheckpointError(CheckpointErrorKind::truncated,
                            "checkpoint truncated at byte " + std::to_string(pos_));
    }
    const auto* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(const std::uint8_t* data, std::size_t n) {
  return static_cast<std::uint32_t>(::crc32(::crc32(0L, Z_NULL, 0), data, static_cast<uInt>(n)));
}

}  // namespace

void Checkpoint::add(std::string name, DType dtype, Shape shape, std::vector<double> values) {
  if (name.empty() || name.size() > 0xffff) {
    throw CheckpointError(CheckpointErrorKind::format, "invalid checkpoint entry name '" + name + "'");
  }
  if (shape.size() > 0xff || shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw CheckpointError(CheckpointErrorKind::format,
                          "entry " + name + ": shape " + shape_str(shape) + " does not match " +
                              std::to_string(values.size()) + " values");
  }
  if (find(name) != nullptr) {
    throw CheckpointError(CheckpointErrorKind::format, "duplicate checkpoint entry " + name);
  }
  if (dtype == DType::f32) {
    for (auto& v : values) v = static_cast<double>(static_cast<float>(v));
  }
  entries_.push_back({std::move(name), dtype, std::move(shape), std::move(values)});
}

template <typename T>
void Checkpoint::add_tensor(std::string name, const Tensor<T>& t) {
  const auto d = t.data();
  add(std::move(name), dtype_of<T>(), t.shape(), std::vector<double>(d.begin(), d.end()));
}

template <typename T>
void Checkpoint::add_registry(const ParameterRegistry<T>& r) {
  for (const auto& p : r.entries()) add_tensor(p.name, p.tensor);
}

const CheckpointEntry* Checkpoint::find(std::string_view name) const {
  for (const auto& e : entries_)
    if (e.name == name) return &e;
  return nullptr;
}

const CheckpointEntry& Checkpoint::at(std::string_view name) const {
  const auto* e = find(name);
  if (e == nullptr) {
    throw CheckpointError(CheckpointErrorKind::format,
                          "checkpoint has no entry '" + std::string(name) + "'");
  }
  return *e;
}

double Checkpoint::scalar(std::string_view name) const {
  const auto& e = at(name);
  if (e.values.size() != 1) {
    throw CheckpointError(CheckpointErrorKind::format,
                          "checkpoint entry '" + std::string(name) + "' is not a scalar");
  }
  return e.values[0];
}

double Checkpoint::scalar_or(std::string_view name, double fallback) const {
  return find(name) != nullptr ? scalar(name) : fallback;
}

template <typename T>
void Checkpoint::load_into(std::string_view name, Tensor<T>& t) const {
  const auto& e = at(name);
  if (e.shape != t.shape()) {
    throw CheckpointError(CheckpointErrorKind::format,
                          "checkpoint entry '" + std::string(name) + "' has shape " +
                              shape_str(e.shape) + ", expected " + shape_str(t.shape()));
  }
  auto dst = t.data_mut();
  for (std::size_t i = 0; i < e.values.size(); ++i) dst[i] = static_cast<T>(e.values[i]);
}

template <typename T>
void Checkpoint::load_registry(const ParameterRegistry<T>& r) const {
  for (const auto& p : r.entries()) {
    auto t = p.tensor;
    load_into(p.name, t);
  }
}

std::vector<std::uint8_t> Checkpoint::to_bytes() const {
  Writer w;
  w.put_bytes(kMagic, 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(entries_.size()));
  for (const auto& e : entries_) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(e.name.size()));
    w.put_bytes(e.name.data(), e.name.size());
    w.put<std::uint8_t>(static_cast<std::uint8_t>(e.dtype));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(e.shape.size()));
    for (auto d : e.shape) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    for (double v : e.values) {
      if (e.dtype == DType::f32) {
        w.put<float>(static_cast<float>(v));
      } else {
        w.put<double>(v);
      }
    }
  }
  w.put<std::uint32_t>(crc_of(w.bytes.data(), w.bytes.size()));
  return std::move(w.bytes);
}

Checkpoint Checkpoint::from_bytes(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw CheckpointError(CheckpointErrorKind::bad_magic, "not a checkpoint (bad magic)");
  }
  Reader header(bytes.subspan(4));
  const auto version = header.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError(CheckpointErrorKind::unsupported_version,
                          "unsupported checkpoint version " + std::to_string(version));
  }
  if (bytes.size() < 16) {
    throw CheckpointError(CheckpointErrorKind::truncated, "checkpoint truncated in header");
  }
  const auto body = bytes.first(bytes.size() - 4);
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + body.size(), 4);
  const auto crc = crc_of(body.data(), body.size());

  Checkpoint ck;
  Reader r(body.subspan(8));
  try {
    const auto count = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
      const auto len = r.get<std::uint16_t>();
      const auto* name = r.take(len);
      std::string entry_name(reinterpret_cast<const char*>(name), len);
      const auto dtype = r.get<std::uint8_t>();
      if (dtype > 1) {
        throw CheckpointError(CheckpointErrorKind::format,
                              "entry " + entry_name + " has unknown dtype " + std::to_string(dtype));
      }
      const auto rank = r.get<std::uint8_t>();
      Shape shape(rank);
      for (auto& d : shape) d = r.get<std::uint32_t>();
      const auto n = static_cast<std::size_t>(shape_numel(shape));
      const std::size_t width = dtype == 0 ? 4 : 8;
      if (n * width > r.remaining()) {
        throw CheckpointError(CheckpointErrorKind::truncated,
                              "checkpoint truncated in entry " + entry_name);
      }
      std::vector<double> values(n);
      for (auto& v : values) v = dtype == 0 ? static_cast<double>(r.get<float>()) : r.get<double>();
      ck.entries_.push_back({std::move(entry_name), static_cast<DType>(dtype), std::move(shape),
                             std::move(values)});
    }
  } catch (const CheckpointError& e) {
    // A malformed entry in a file whose checksum fails is reported as corruption.
    if (e.kind() == CheckpointErrorKind::format && crc != stored_crc) {
      throw CheckpointError(CheckpointErrorKind::crc_mismatch, "checkpoint CRC mismatch");
    }
    throw;
  }
  if (crc != stored_crc) {
    throw CheckpointError(CheckpointErrorKind::crc_mismatch, "checkpoint CRC mismatch");
  }
  if (r.remaining() != 0) {
    throw CheckpointError(CheckpointErrorKind::format,
                          std::to_string(r.remaining()) + " unexpected bytes before checksum");
  }
  return ck;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  const auto bytes = to_bytes();
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError(CheckpointErrorKind::io, "cannot write " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError(CheckpointErrorKind::io, "write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointErrorKind::io, "cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return from_bytes(bytes);
  } catch (const CheckpointError& e) {
    throw CheckpointError(e.kind(), path.string() + ": " + e.what());
  }
}

template void Checkpoint::add_tensor(std::string, const Tensor<float>&);
template void Checkpoint::add_tensor(std::string, const Tensor<double>&);
template void Checkpoint::add_registry(const ParameterRegistry<float>&);
template void Checkpoint::add_registry(const ParameterRegistry<double>&);
template void Checkpoint::load_into(std::string_view, Tensor<float>&) const;
template void Checkpoint::load_into(std::string_view, Tensor<double>&) const;
template void Checkpoint::load_registry(const ParameterRegistry<float>&) const;
template void Checkpoint::load_registry(const ParameterRegistry<double>&) const;

}  // namespace flowreg
