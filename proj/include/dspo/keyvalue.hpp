#pragma once

#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dspo/errors.hpp"

namespace dspo {

/// Flat `key = value` configuration. `#` starts a comment. Keys are consumed
/// as they are read so that leftovers can be reported as unknown.
class KeyValueFile {
 public:
  KeyValueFile() = default;

  static KeyValueFile parse(std::istream& in, const std::string& origin = "<input>") {
    KeyValueFile kv;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const auto eq = line.find('=');
      const std::string key = trim(line.substr(0, eq));
      if (key.empty() && eq == std::string::npos) continue;
      if (eq == std::string::npos || key.empty())
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected `key = value`");
      if (kv.values_.count(key))
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate key `" + key + "`");
      kv.values_[key] = trim(line.substr(eq + 1));
    }
    return kv;
  }

  static KeyValueFile load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file `" + path + "`");
    return parse(in, path);
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  std::string get_string(const std::string& key, const std::string& fallback) {
    used_.insert(key);
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  double get_double(const std::string& key, double fallback) {
    used_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    return to_double(key, it->second);
  }

  long long get_int(const std::string& key, long long fallback) {
    used_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    long long out = 0;
    const auto& s = it->second;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    if (ec != std::errc() || p != s.data() + s.size())
      throw ConfigError("key `" + key + "`: expected an integer, got `" + s + "`");
    return out;
  }

  bool get_bool(const std::string& key, bool fallback) {
    used_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const auto& s = it->second;
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw ConfigError("key `" + key + "`: expected a boolean, got `" + s + "`");
  }

  std::vector<double> get_doubles(const std::string& key, std::vector<double> fallback) {
    used_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<double> out;
    std::istringstream ss(it->second);
    std::string tok;
    while (ss >> tok) out.push_back(to_double(key, tok));
    return out;
  }

  /// Keys present in the file but never queried.
  std::vector<std::string> unused_keys() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_)
      if (!used_.count(k)) out.push_back(k);
    return out;
  }

  void reject_unknown(const std::string& origin) const {
    auto unknown = unused_keys();
    if (unknown.empty()) return;
    std::string msg = origin + ": unknown key(s):";
    for (const auto& k : unknown) msg += " " + k;
    throw ConfigError(msg);
  }

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  static double to_double(const std::string& key, const std::string& s) {
    try {
      std::size_t pos = 0;
      double v = std::stod(s, &pos);
      if (pos != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw ConfigError("key `" + key + "`: expected a number, got `" + s + "`");
    }
  }

  std::map<std::string, std::string> values_;
  std::set<std::string> used_;
};

}  // namespace dspo
