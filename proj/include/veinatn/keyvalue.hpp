// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace veinatn {

// Line-oriented "key = value" text used for configs, checkpoint config
// blocks and metric reports. '#' starts a comment line; keys keep their
// insertion order.
class KeyValueText {
 public:
  static KeyValueText parse(std::string_view text);
  static KeyValueText load(const std::filesystem::path& path);

  std::string serialize() const;
  void save(const std::filesystem::path& path) const;

  void set(std::string key, std::string value);
  bool contains(std::string_view key) const;
  std::optional<std::string> get(std::string_view key) const;

  // Throws ConfigError naming the key and an example value when absent.
  std::string require(std::string_view key, std::string_view example) const;

  double get_double(std::string_view key, double fallback) const;
  long get_int(std::string_view key, long fallback) const;
  double require_double(std::string_view key, std::string_view example) const;
  long require_int(std::string_view key, std::string_view example) const;

  const std::vector<std::pair<std::string, std::string>>& entries() const noexcept { return entries_; }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

double parse_double(std::string_view text, std::string_view what);
long parse_int(std::string_view text, std::string_view what);
std::vector<long> parse_int_list(std::string_view text, std::string_view what);

// Shortest round-trip decimal for a double (printf %.17g trimmed).
std::string format_double(double v);
// Fixed number of significant digits (printf %.Ng).
std::string format_sig(double v, int digits);

}  // namespace veinatn
