#pragma once

// Binary tensor container shared by corpus cases, checkpoints and atlases.
//
//   "ATLR" | version u8 = 1 | entry count u32
//   per entry: name length u16 | UTF-8 name | dtype u8 | ndim u8 |
//              dims u32 x ndim | row-major payload
//
// All integers and reals are little-endian. dtype 0 = float32, 1 = uint8.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "atlas_replay/errors.hpp"

namespace atlas_replay {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

enum class DType : std::uint8_t { float32 = 0, uint8 = 1 };

struct ContainerEntry {
  std::string name;
  DType dtype = DType::float32;
  std::vector<std::uint32_t> dims;
  std::vector<float> f32;
  std::vector<std::uint8_t> u8;

  std::size_t element_count() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }

  static ContainerEntry floats(std::string name, std::vector<std::uint32_t> dims, std::vector<float> data) {
    ContainerEntry e{std::move(name), DType::float32, std::move(dims), std::move(data), {}};
    if (e.f32.size() != e.element_count()) throw InvalidShape("container entry '" + e.name + "': dims/payload mismatch");
    return e;
  }
  static ContainerEntry bytes(std::string name, std::vector<std::uint32_t> dims, std::vector<std::uint8_t> data) {
    ContainerEntry e{std::move(name), DType::uint8, std::move(dims), {}, std::move(data)};
    if (e.u8.size() != e.element_count()) throw InvalidShape("container entry '" + e.name + "': dims/payload mismatch");
    return e;
  }
  static ContainerEntry text(std::string name, std::string_view s) {
    return bytes(std::move(name), {static_cast<std::uint32_t>(s.size())}, std::vector<std::uint8_t>(s.begin(), s.end()));
  }
  std::string as_text() const { return std::string(u8.begin(), u8.end()); }

  friend bool operator==(const ContainerEntry&, const ContainerEntry&) = default;
};

struct Container {
  std::vector<ContainerEntry> entries;

  const ContainerEntry* find(std::string_view name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }
  const ContainerEntry& get(std::string_view name) const {
    if (auto* e = find(name)) return *e;
    throw FormatError("missing entry '" + std::string(name) + "'", 0);
  }

  friend bool operator==(const Container&, const Container&) = default;
};

namespace detail {

template <class T>
void put(std::vector<std::uint8_t>& out, T v) {
  std::uint8_t buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.insert(out.end(), buf, buf + sizeof(T));
}

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  template <class T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    need(n, what);
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (data_.size() - pos_ < n) throw FormatError(std::string("truncated container while reading ") + what, pos_);
  }
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline constexpr char kContainerMagic[4] = {'A', 'T', 'L', 'R'};
inline constexpr std::uint8_t kContainerVersion = 1;

inline std::vector<std::uint8_t> encode_container(const Container& c) {
  std::vector<std::uint8_t> out(kContainerMagic, kContainerMagic + 4);
  out.push_back(kContainerVersion);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(c.entries.size()));
  for (const auto& e : c.entries) {
    if (e.name.size() > 0xFFFF) throw InvalidShape("container entry name too long");
    if (e.dims.size() > 0xFF) throw InvalidShape("container entry rank too large");
    detail::put<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    out.push_back(static_cast<std::uint8_t>(e.dtype));
    out.push_back(static_cast<std::uint8_t>(e.dims.size()));
    for (auto d : e.dims) detail::put<std::uint32_t>(out, d);
    const std::size_t n = e.element_count();
    if (e.dtype == DType::float32) {
      if (e.f32.size() != n) throw InvalidShape("container entry '" + e.name + "': dims/payload mismatch");
      const auto* p = reinterpret_cast<const std::uint8_t*>(e.f32.data());
      out.insert(out.end(), p, p + n * sizeof(float));
    } else {
      if (e.u8.size() != n) throw InvalidShape("container entry '" + e.name + "': dims/payload mismatch");
      out.insert(out.end(), e.u8.begin(), e.u8.end());
    }
  }
  return out;
}

inline Container decode_container(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  auto magic = r.take(4, "magic");
  if (std::memcmp(magic.data(), kContainerMagic, 4) != 0) throw FormatError("bad magic", 0);
  const auto version = r.get<std::uint8_t>("version");
  if (version != kContainerVersion) throw FormatError("unsupported version " + std::to_string(version), 4);
  const auto count = r.get<std::uint32_t>("entry count");
  Container c;
  for (std::uint32_t i = 0; i < count; ++i) {
    ContainerEntry e;
    const auto name_len = r.get<std::uint16_t>("name length");
    auto name = r.take(name_len, "name");
    e.name.assign(name.begin(), name.end());
    const std::size_t dtype_at = r.offset();
    const auto dtype = r.get<std::uint8_t>("dtype");
    if (dtype > 1) throw FormatError("unknown dtype " + std::to_string(dtype), dtype_at);
    e.dtype = static_cast<DType>(dtype);
    const auto ndim = r.get<std::uint8_t>("ndim");
    for (std::uint8_t d = 0; d < ndim; ++d) e.dims.push_back(r.get<std::uint32_t>("dim"));
    const std::size_t n = e.element_count();
    if (e.dtype == DType::float32) {
      auto payload = r.take(n * sizeof(float), "payload");
      e.f32.resize(n);
      std::memcpy(e.f32.data(), payload.data(), payload.size());
    } else {
      auto payload = r.take(n, "payload");
      e.u8.assign(payload.begin(), payload.end());
    }
    c.entries.push_back(std::move(e));
  }
  if (!r.at_end()) throw FormatError("trailing bytes after last entry", r.offset());
  return c;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path + "'");
}

inline void write_container(const std::string& path, const Container& c) { write_file_bytes(path, encode_container(c)); }

inline Container read_container(const std::string& path) { return decode_container(read_file_bytes(path)); }

}  // namespace atlas_replay
