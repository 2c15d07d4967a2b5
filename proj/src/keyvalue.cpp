// SPDX-License-Identifier: Apache-2.0

#include "veinatn/keyvalue.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "veinatn/error.hpp"

namespace veinatn {
namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

KeyValueText KeyValueText::parse(std::string_view text) {
  KeyValueText kv;
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    std::string_view line = trim(text.substr(0, nl));
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value', got '" + std::string(line) +
                        "'");
    }
    const std::string_view key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
    kv.set(std::string(key), std::string(trim(line.substr(eq + 1))));
  }
  return kv;
}

KeyValueText KeyValueText::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string KeyValueText::serialize() const {
  std::string out;
  for (const auto& [k, v] : entries_) out += k + " = " + v + "\n";
  return out;
}

void KeyValueText::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << serialize();
}

void KeyValueText::set(std::string key, std::string value) {
  for (auto& [k, v] : entries_) {
    if (k == key) {
      v = std::move(value);
      return;
    }
  }
  entries_.emplace_back(std::move(key), std::move(value));
}

bool KeyValueText::contains(std::string_view key) const { return get(key).has_value(); }

std::optional<std::string> KeyValueText::get(std::string_view key) const {
  for (const auto& [k, v] : entries_) {
    if (k == key) return v;
  }
  return std::nullopt;
}

std::string KeyValueText::require(std::string_view key, std::string_view example) const {
  auto v = get(key);
  if (!v) {
    throw ConfigError("missing config key '" + std::string(key) + "' (example: " + std::string(key) + " = " +
                      std::string(example) + ")");
  }
  return *v;
}

double KeyValueText::get_double(std::string_view key, double fallback) const {
  auto v = get(key);
  return v ? parse_double(*v, key) : fallback;
}

long KeyValueText::get_int(std::string_view key, long fallback) const {
  auto v = get(key);
  return v ? parse_int(*v, key) : fallback;
}

double KeyValueText::require_double(std::string_view key, std::string_view example) const {
  return parse_double(require(key, example), key);
}

long KeyValueText::require_int(std::string_view key, std::string_view example) const {
  return parse_int(require(key, example), key);
}

double parse_double(std::string_view text, std::string_view what) {
  const std::string s(trim(text));
  if (s == "inf" || s == "infinity") return INFINITY;
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError("invalid number for '" + std::string(what) + "': '" + s + "'");
}

long parse_int(std::string_view text, std::string_view what) {
  const std::string_view s = trim(text);
  long v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw ConfigError("invalid integer for '" + std::string(what) + "': '" + std::string(s) + "'");
  }
  return v;
}

std::vector<long> parse_int_list(std::string_view text, std::string_view what) {
  std::vector<long> out;
  while (true) {
    const auto comma = text.find_first_of(",x");
    out.push_back(parse_int(text.substr(0, comma), what));
    if (comma == std::string_view::npos) break;
    text = text.substr(comma + 1);
  }
  return out;
}

std::string format_double(double v) {
  char buf[64];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

std::string format_sig(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

}  // namespace veinatn
