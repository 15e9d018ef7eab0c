#pragma once

// Binary parameter container:
//
//   "ATLF" | u32 version | u32 entry count
//   per entry: u32 name length | name bytes | u64 offset | u64 rows | u64 cols
//   u64 value count | value count × f64
//
// All integers and floats are little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <type_traits>

#include "atlas/diffcore.hpp"

namespace atlas::diff {

inline constexpr char kCheckpointMagic[4] = {'A', 'T', 'L', 'F'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void put_le(std::string& out, T v) {
  std::uint64_t bits;
  if constexpr (std::is_same_v<T, double>) {
    bits = std::bit_cast<std::uint64_t>(v);
  } else {
    bits = static_cast<std::uint64_t>(v);
  }
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    std::uint64_t bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    if constexpr (std::is_same_v<T, double>) {
      return std::bit_cast<double>(bits);
    } else {
      return static_cast<T>(bits);
    }
  }
  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw IoError("checkpoint: truncated data");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_params(const ParamStore& store) {
  std::string out(kCheckpointMagic, 4);
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(store.layout().size()));
  for (const auto& s : store.layout()) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.name.size()));
    out += s.name;
    detail::put_le<std::uint64_t>(out, s.offset);
    detail::put_le<std::uint64_t>(out, s.rows);
    detail::put_le<std::uint64_t>(out, s.cols);
  }
  detail::put_le<std::uint64_t>(out, store.size());
  for (double v : store.values()) detail::put_le<double>(out, v);
  return out;
}

inline ParamStore decode_params(std::string_view bytes) {
  detail::Reader in(bytes);
  if (in.take(4) != std::string_view(kCheckpointMagic, 4)) throw IoError("checkpoint: bad magic bytes");
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw IoError("checkpoint: unsupported format version " + std::to_string(version) + " (expected " +
                  std::to_string(kCheckpointVersion) + ")");
  const auto count = in.get<std::uint32_t>();
  std::vector<ParamSlot> layout;
  layout.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    ParamSlot s;
    s.name = std::string(in.take(in.get<std::uint32_t>()));
    s.offset = in.get<std::uint64_t>();
    s.rows = in.get<std::uint64_t>();
    s.cols = in.get<std::uint64_t>();
    layout.push_back(std::move(s));
  }
  const auto n = in.get<std::uint64_t>();
  if (n > bytes.size() / 8) throw IoError("checkpoint: truncated data");
  std::vector<double> values(n);
  for (auto& v : values) v = in.get<double>();
  if (!in.done()) throw IoError("checkpoint: trailing bytes");
  try {
    return ParamStore::from_layout(std::move(layout), std::move(values));
  } catch (const InvalidArgument& e) {
    throw IoError(std::string("checkpoint: ") + e.what());
  }
}

inline void save_params(const std::filesystem::path& path, const ParamStore& store) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  const std::string bytes = encode_params(store);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for '" + path.string() + "'");
}

inline ParamStore load_params(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    return decode_params(bytes);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

}  // namespace atlas::diff
