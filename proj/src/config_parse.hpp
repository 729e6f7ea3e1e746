#pragma once

// "key = value" config files shared by the pipeline and generator configs.

#include <charconv>
#include <cmath>
#include <map>
#include <sstream>
#include <string>

#include "grouptr/errors.hpp"

namespace grouptr::config {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

struct Line {
  std::size_t number = 0;
  std::string value;
};

// '#' starts a comment; blank lines are ignored; duplicate keys are errors.
inline std::map<std::string, Line> read_key_values(const std::string& text) {
  std::map<std::string, Line> entries;
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ValidationError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    if (entries.count(key)) {
      throw ValidationError("config line " + std::to_string(line_no) + ": duplicate key " + key);
    }
    entries[key] = {line_no, trim(line.substr(eq + 1))};
  }
  return entries;
}

class Value {
 public:
  Value(const std::string& key, const Line& entry) : key_(key), entry_(entry) {}

  [[noreturn]] void fail(const std::string& expected) const {
    throw ValidationError("config line " + std::to_string(entry_.number) + ": " + key_ + " expects " +
                          expected + ", got \"" + entry_.value + "\"");
  }

  [[noreturn]] void unknown() const {
    throw ValidationError("config line " + std::to_string(entry_.number) + ": unknown key " + key_);
  }

  double real() const {
    double v = 0.0;
    const auto& s = entry_.value;
    const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || end != s.data() + s.size() || !std::isfinite(v)) fail("a number");
    return v;
  }

  std::size_t count() const {
    std::size_t v = 0;
    const auto& s = entry_.value;
    const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || end != s.data() + s.size()) fail("a non-negative integer");
    return v;
  }

  bool flag() const {
    if (entry_.value == "true" || entry_.value == "1") return true;
    if (entry_.value == "false" || entry_.value == "0") return false;
    fail("true or false");
  }

  const std::string& text() const { return entry_.value; }

 private:
  std::string key_;
  Line entry_;
};

}  // namespace grouptr::config
