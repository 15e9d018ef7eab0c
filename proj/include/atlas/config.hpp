#pragma once

// `key = value` text configuration. Blank lines and `#` comments are ignored;
// later keys override earlier ones.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "atlas/error.hpp"
#include "atlas/geometry.hpp"

namespace atlas::config {

using KeyValues = std::map<std::string, std::string>;

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline KeyValues parse(std::string_view text, const std::string& source = "<config>") {
  KeyValues kv;
  std::size_t pos = 0, line_no = 0;
  while (pos <= text.size()) {
    const auto end = std::min(text.find('\n', pos), text.size());
    std::string line = trim(text.substr(pos, end - pos));
    pos = end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line = trim(line.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(source, line_no, "expected 'key = value'");
    const auto key = trim(line.substr(0, eq));
    if (key.empty()) throw ParseError(source, line_no, "empty key");
    kv[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

inline KeyValues load(const std::filesystem::path& path) {
  return parse(geometry::detail::read_file(path), path.string());
}

inline double as_double(const std::string& key, const std::string& v) {
  auto d = geometry::detail::parse_double(v);
  if (!d) throw InvalidArgument("config key '" + key + "': expected a number, got '" + v + "'");
  return *d;
}

inline std::uint64_t as_uint(const std::string& key, const std::string& v) {
  std::uint64_t out;
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc{} || r.ptr != v.data() + v.size())
    throw InvalidArgument("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
  return out;
}

inline bool as_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw InvalidArgument("config key '" + key + "': expected a boolean, got '" + v + "'");
}

inline std::vector<std::string> as_list(const std::string& v) {
  std::vector<std::string> out;
  std::size_t b = 0;
  while (b <= v.size()) {
    auto e = v.find(',', b);
    if (e == std::string::npos) e = v.size();
    auto item = trim(std::string_view(v).substr(b, e - b));
    if (!item.empty()) out.push_back(item);
    b = e + 1;
  }
  return out;
}

inline std::vector<std::size_t> as_size_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  for (const auto& item : as_list(v)) out.push_back(static_cast<std::size_t>(as_uint(key, item)));
  return out;
}

}  // namespace atlas::config
