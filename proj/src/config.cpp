// SPDX-License-Identifier: Apache-2.0
#include "renofeat/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "renofeat/text.hpp"

namespace renofeat {

Config Config::parse(std::string_view body, const std::string& source) {
  Config config;
  config.source_ = source;
  std::istringstream in{std::string(body)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view view = line;
    if (const auto hash = view.find('#'); hash != std::string_view::npos) view = view.substr(0, hash);
    view = text::trim(view);
    if (view.empty()) continue;
    const auto eq = view.find('=');
    const std::string at = source + ":" + std::to_string(line_no);
    if (eq == std::string_view::npos) {
      throw ConfigError(at + ": expected 'section.key = value', got '" + std::string(view) + "'");
    }
    const std::string key(text::trim(view.substr(0, eq)));
    const std::string value(text::trim(view.substr(eq + 1)));
    const auto dot = key.find('.');
    if (key.empty() || dot == 0 || dot == std::string::npos || dot + 1 == key.size() ||
        key.find_first_of(" \t") != std::string::npos) {
      throw ConfigError(at + ": malformed key '" + key + "' (expected section.key)");
    }
    if (value.empty()) throw ConfigError(at + ": key '" + key + "' has no value");
    if (config.entries_.count(key) != 0) {
      throw ConfigError(at + ": duplicate key '" + key + "' (first set on line " +
                        std::to_string(config.entries_[key].line) + ")");
    }
    config.entries_[key] = Entry{value, line_no};
  }
  return config;
}

Config Config::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::ostringstream body;
  body << in.rdbuf();
  return parse(body.str(), path.string());
}

void Config::set(const std::string& key, std::string value) {
  entries_[key] = Entry{std::move(value), 0};
}

std::string Config::where(const std::string& key) const {
  const auto it = entries_.find(key);
  if (it == entries_.end() || it->second.line == 0) return "key '" + key + "'";
  return source_ + ":" + std::to_string(it->second.line) + ": key '" + key + "'";
}

const Config::Entry& Config::require(const std::string& key) const {
  const auto it = entries_.find(key);
  if (it == entries_.end()) {
    throw ConfigError((source_.empty() ? std::string() : source_ + ": ") + "missing required key '" +
                      key + "'");
  }
  return it->second;
}

std::string Config::get_string(const std::string& key) const { return require(key).value; }

double Config::get_double(const std::string& key) const {
  const auto v = text::parse_double(require(key).value);
  if (!v) throw ConfigError(where(key) + ": expected a number, got '" + require(key).value + "'");
  return *v;
}

std::uint64_t Config::get_u64(const std::string& key) const {
  const auto v = text::parse_u64(require(key).value);
  if (!v) {
    throw ConfigError(where(key) + ": expected a non-negative integer, got '" + require(key).value + "'");
  }
  return *v;
}

bool Config::get_bool(const std::string& key) const {
  const std::string& v = require(key).value;
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(where(key) + ": expected true or false, got '" + v + "'");
}

std::vector<double> Config::get_list(const std::string& key) const {
  std::vector<double> out;
  for (const auto& item : text::split(require(key).value, ',')) {
    const auto v = text::parse_double(item);
    if (!v) throw ConfigError(where(key) + ": list item '" + item + "' is not a number");
    out.push_back(*v);
  }
  return out;
}

std::string Config::get_string(const std::string& key, const std::string& fallback) const {
  return has(key) ? get_string(key) : fallback;
}
double Config::get_double(const std::string& key, double fallback) const {
  return has(key) ? get_double(key) : fallback;
}
std::uint64_t Config::get_u64(const std::string& key, std::uint64_t fallback) const {
  return has(key) ? get_u64(key) : fallback;
}
bool Config::get_bool(const std::string& key, bool fallback) const {
  return has(key) ? get_bool(key) : fallback;
}

void Config::reject_unknown(const std::set<std::string>& known) const {
  std::vector<std::pair<std::size_t, std::string>> unknown;
  for (const auto& [key, entry] : entries_) {
    if (known.count(key) == 0) unknown.emplace_back(entry.line, key);
  }
  if (unknown.empty()) return;
  std::sort(unknown.begin(), unknown.end());
  throw ConfigError(where(unknown.front().second) + " is not a recognised setting");
}

std::string Config::serialize() const {
  std::string out;
  for (const auto& [key, entry] : entries_) out += key + " = " + entry.value + "\n";
  return out;
}

std::vector<std::string> Config::keys() const {
  std::vector<std::string> out;
  for (const auto& [key, entry] : entries_) out.push_back(key);
  return out;
}

}  // namespace renofeat
