#pragma once

// Flat configuration files:
//
//   # comment
//   [predictor]
//   epochs = 20
//   learning_rate = 1e-3
//   [sweep]
//   policies = ["random", "ras"]
//   budgets = [0.02, 0.04]
//
// A [section] header prefixes the keys below it ("predictor.epochs"). Values
// are numbers, true/false, double-quoted strings, or one-line lists of those.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ras/util/hash.hpp"

namespace ras::harness {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FlatConfig {
 public:
  static FlatConfig parse(const std::string& text, const std::string& origin = "<config>") {
    FlatConfig c;
    std::istringstream is(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const std::string s = trim(strip_comment(line));
      if (s.empty()) continue;
      const std::string where = origin + ":" + std::to_string(lineno);
      if (s.front() == '[' && s.find('=') == std::string::npos) {
        if (s.back() != ']') throw ConfigError(where + ": unterminated section header");
        section = trim(s.substr(1, s.size() - 2));
        if (!valid_key(section)) throw ConfigError(where + ": bad section name '" + section + "'");
        continue;
      }
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
      const std::string key = trim(s.substr(0, eq));
      const std::string value = trim(s.substr(eq + 1));
      if (!valid_key(key)) throw ConfigError(where + ": bad key '" + key + "'");
      if (value.empty()) throw ConfigError(where + ": missing value for '" + key + "'");
      const std::string full = section.empty() ? key : section + "." + key;
      if (c.values_.count(full)) throw ConfigError(where + ": duplicate key '" + full + "'");
      c.values_[full] = value;
      c.origin_[full] = where;
    }
    return c;
  }

  static FlatConfig load(const std::string& path) { return parse(util::read_file(path), path); }

  void set(const std::string& key, const std::string& raw_value) {
    if (!valid_key(key)) throw ConfigError("bad key '" + key + "'");
    values_[key] = raw_value;
    origin_[key] = "<override>";
  }

  [[nodiscard]] bool has(const std::string& key) const { return values_.count(key) != 0; }

  [[nodiscard]] double get_double(const std::string& key, double fallback) const {
    const auto* v = lookup(key);
    return v ? to_double(*v, key) : fallback;
  }

  [[nodiscard]] std::int64_t get_int(const std::string& key, std::int64_t fallback) const {
    const auto* v = lookup(key);
    return v ? to_int(*v, key) : fallback;
  }

  [[nodiscard]] std::size_t get_count(const std::string& key, std::size_t fallback) const {
    const auto* v = lookup(key);
    if (!v) return fallback;
    const auto n = to_int(*v, key);
    if (n < 0) throw ConfigError(where(key) + ": '" + key + "' must be non-negative");
    return static_cast<std::size_t>(n);
  }

  [[nodiscard]] bool get_bool(const std::string& key, bool fallback) const {
    const auto* v = lookup(key);
    if (!v) return fallback;
    if (*v == "true") return true;
    if (*v == "false") return false;
    throw ConfigError(where(key) + ": '" + key + "' must be true or false");
  }

  [[nodiscard]] std::string get_string(const std::string& key, const std::string& fallback) const {
    const auto* v = lookup(key);
    return v ? to_string(*v, key) : fallback;
  }

  [[nodiscard]] std::vector<double> get_doubles(const std::string& key, std::vector<double> fallback) const {
    const auto* v = lookup(key);
    if (!v) return fallback;
    std::vector<double> out;
    for (const auto& item : list_items(*v, key)) out.push_back(to_double(item, key));
    return out;
  }

  [[nodiscard]] std::vector<std::int64_t> get_ints(const std::string& key, std::vector<std::int64_t> fallback) const {
    const auto* v = lookup(key);
    if (!v) return fallback;
    std::vector<std::int64_t> out;
    for (const auto& item : list_items(*v, key)) out.push_back(to_int(item, key));
    return out;
  }

  [[nodiscard]] std::vector<std::string> get_strings(const std::string& key, std::vector<std::string> fallback) const {
    const auto* v = lookup(key);
    if (!v) return fallback;
    std::vector<std::string> out;
    for (const auto& item : list_items(*v, key)) out.push_back(to_string(item, key));
    return out;
  }

  /// Keys present in the file that no getter has asked for.
  [[nodiscard]] std::vector<std::string> unused_keys() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_) {
      if (!read_.count(k)) out.push_back(k);
    }
    return out;
  }

  void reject_unused() const {
    const auto u = unused_keys();
    if (u.empty()) return;
    std::string msg = "unknown config key";
    msg += u.size() > 1 ? "s: " : ": ";
    for (std::size_t i = 0; i < u.size(); ++i) msg += (i ? ", " : "") + where(u[i]) + " '" + u[i] + "'";
    throw ConfigError(msg);
  }

  /// Sorted "key = value" lines; the input to the config hash.
  [[nodiscard]] std::string canonical() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

  [[nodiscard]] const std::map<std::string, std::string>& raw() const noexcept { return values_; }

 private:
  std::map<std::string, std::string> values_;
  std::map<std::string, std::string> origin_;
  mutable std::set<std::string> read_;

  const std::string* lookup(const std::string& key) const {
    read_.insert(key);
    const auto it = values_.find(key);
    return it == values_.end() ? nullptr : &it->second;
  }

  [[nodiscard]] std::string where(const std::string& key) const {
    const auto it = origin_.find(key);
    return it == origin_.end() ? "<config>" : it->second;
  }

  static std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
  }

  static std::string strip_comment(const std::string& s) {
    bool quoted = false;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] == '"') quoted = !quoted;
      if (s[i] == '#' && !quoted) return s.substr(0, i);
    }
    return s;
  }

  static bool valid_key(const std::string& k) {
    if (k.empty()) return false;
    return std::all_of(k.begin(), k.end(), [](char c) {
      return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
    });
  }

  double to_double(const std::string& v, const std::string& key) const {
    double out = 0.0;
    const auto* end = v.data() + v.size();
    const auto r = std::from_chars(v.data(), end, out);
    if (r.ec != std::errc() || r.ptr != end) throw ConfigError(where(key) + ": '" + key + "' is not a number: " + v);
    return out;
  }

  std::int64_t to_int(const std::string& v, const std::string& key) const {
    std::int64_t out = 0;
    const auto* end = v.data() + v.size();
    const auto r = std::from_chars(v.data(), end, out);
    if (r.ec != std::errc() || r.ptr != end) throw ConfigError(where(key) + ": '" + key + "' is not an integer: " + v);
    return out;
  }

  std::string to_string(const std::string& v, const std::string& key) const {
    if (v.size() < 2 || v.front() != '"' || v.back() != '"') {
      throw ConfigError(where(key) + ": '" + key + "' must be a double-quoted string");
    }
    return v.substr(1, v.size() - 2);
  }

  std::vector<std::string> list_items(const std::string& v, const std::string& key) const {
    if (v.size() < 2 || v.front() != '[' || v.back() != ']') {
      throw ConfigError(where(key) + ": '" + key + "' must be a [list]");
    }
    std::vector<std::string> out;
    const std::string body = trim(v.substr(1, v.size() - 2));
    if (body.empty()) return out;
    std::string cur;
    bool quoted = false;
    for (char ch : body) {
      if (ch == '"') quoted = !quoted;
      if (ch == ',' && !quoted) {
        out.push_back(trim(cur));
        cur.clear();
      } else {
        cur.push_back(ch);
      }
    }
    out.push_back(trim(cur));
    for (const auto& item : out) {
      if (item.empty()) throw ConfigError(where(key) + ": empty list item in '" + key + "'");
    }
    return out;
  }
};

}  // namespace ras::harness
