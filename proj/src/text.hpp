// SPDX-License-Identifier: Apache-2.0
// Small text helpers for the key=value formats.
#pragma once

#include <charconv>
#include <cstddef>
#include <cstdio>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace amn::text {

inline std::string trim(const std::string &s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos)
    return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string &s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep))
    out.push_back(item);
  if (!s.empty() && s.back() == sep)
    out.emplace_back();
  return out;
}

template <typename T> std::string join(const std::vector<T> &items, const char *sep = ",") {
  std::ostringstream os;
  for (std::size_t i = 0; i < items.size(); ++i)
    os << (i ? sep : "") << items[i];
  return os.str();
}

inline std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v); // shortest round-trip form
  return std::string(buf, r.ptr);
}

inline double parse_double(const std::string &key, const std::string &v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size())
      throw std::invalid_argument(v);
    return d;
  } catch (const std::exception &) {
    throw std::invalid_argument("'" + key + "' expects a number, got '" + v + "'");
  }
}

inline unsigned long long parse_uint(const std::string &key, const std::string &v) {
  unsigned long long out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw std::invalid_argument("'" + key + "' expects a non-negative integer, got '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string &key, const std::string &v) {
  if (v == "true" || v == "1" || v == "yes")
    return true;
  if (v == "false" || v == "0" || v == "no")
    return false;
  throw std::invalid_argument("'" + key + "' expects true/false, got '" + v + "'");
}

inline std::vector<std::size_t> parse_size_list(const std::string &key, const std::string &v) {
  std::vector<std::size_t> out;
  for (const auto &item : split(v, ','))
    out.push_back(static_cast<std::size_t>(parse_uint(key, trim(item))));
  return out;
}

struct KeyValue {
  std::string key;
  std::string value;
  std::size_t line = 0;
};

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
inline std::vector<KeyValue> parse_key_values(const std::string &content,
                                              const std::string &source) {
  std::vector<KeyValue> out;
  std::istringstream is(content);
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (const auto hash = line.find('#'); hash != std::string::npos)
      line.erase(hash);
    line = trim(line);
    if (line.empty())
      continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument(source + ":" + std::to_string(n) + ": expected key=value");
    out.push_back({trim(line.substr(0, eq)), trim(line.substr(eq + 1)), n});
  }
  return out;
}

} // namespace amn::text
