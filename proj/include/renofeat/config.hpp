// SPDX-License-Identifier: Apache-2.0
//
// Flat configuration files: one `section.key = value` per line, `#` starts a
// comment, list values are comma separated.
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace renofeat {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Config {
 public:
  static Config parse(std::string_view text, const std::string& source = "<config>");
  static Config load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return entries_.count(key) != 0; }
  void set(const std::string& key, std::string value);

  /// Required lookups throw ConfigError naming the key when it is absent or
  /// its value does not parse.
  std::string get_string(const std::string& key) const;
  double get_double(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<double> get_list(const std::string& key) const;

  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  /// Throws ConfigError for the first key (in file order) outside `known`.
  void reject_unknown(const std::set<std::string>& known) const;

  /// Keys in sorted order, one `key = value` line each.
  std::string serialize() const;
  std::vector<std::string> keys() const;

 private:
  struct Entry {
    std::string value;
    std::size_t line = 0;  // 0 for programmatic values
  };
  std::string where(const std::string& key) const;
  const Entry& require(const std::string& key) const;

  std::string source_;
  std::map<std::string, Entry> entries_;
};

}  // namespace renofeat
