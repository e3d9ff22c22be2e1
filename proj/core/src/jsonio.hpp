#pragma once

// Internal helpers for strict JSON handling: typed getters with
// path-prefixed errors and unknown-key rejection. Not installed.

#include <cstdint>
#include <set>
#include <string>

#include "json.hpp"
#include "sslc/util.hpp"

namespace sslc::jsonio {

using json = nlohmann::json;

inline json parse(const std::string& text, const std::string& where) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) throw ConfigError(where + ": not valid JSON");
  return j;
}

// Reads one JSON object; every accessed key is marked consumed and finish()
// rejects the rest, so unknown keys surface with their full path.
class ObjectReader {
 public:
  // Owns a copy so construction from a temporary (the usual pattern) is safe.
  ObjectReader(json j, std::string path)
      : j_(std::move(j)), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  std::string key_path(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  double number(const std::string& key, double def) {
    if (!consume(key)) return def;
    return as_number(key);
  }
  double require_number(const std::string& key) {
    if (!consume(key)) throw ConfigError(key_path(key) + ": missing required key");
    return as_number(key);
  }

  std::int64_t integer(const std::string& key, std::int64_t def) {
    if (!consume(key)) return def;
    return as_integer(key);
  }
  std::int64_t require_integer(const std::string& key) {
    if (!consume(key)) throw ConfigError(key_path(key) + ": missing required key");
    return as_integer(key);
  }

  bool boolean(const std::string& key, bool def) {
    if (!consume(key)) return def;
    const json& v = j_.at(key);
    if (!v.is_boolean()) throw ConfigError(key_path(key) + ": expected a boolean");
    return v.get<bool>();
  }

  std::string string(const std::string& key, const std::string& def) {
    if (!consume(key)) return def;
    return as_string(key);
  }
  std::string require_string(const std::string& key) {
    if (!consume(key)) throw ConfigError(key_path(key) + ": missing required key");
    return as_string(key);
  }

  // Nested object; an absent key reads as an empty object (all defaults).
  ObjectReader object(const std::string& key) {
    if (!consume(key)) return ObjectReader(json::object(), key_path(key));
    const json& v = j_.at(key);
    if (!v.is_object()) throw ConfigError(key_path(key) + ": expected an object");
    return ObjectReader(v, key_path(key));
  }

  // Raw access for arrays and free-form values; nullptr when absent.
  const json* raw(const std::string& key) {
    if (!consume(key)) return nullptr;
    return &j_.at(key);
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      (void)value;
      if (!consumed_.count(key)) {
        throw ConfigError("unknown key: " + key_path(key));
      }
    }
  }

  const json& underlying() const { return j_; }

 private:
  bool consume(const std::string& key) {
    if (!j_.contains(key)) return false;
    consumed_.insert(key);
    return true;
  }
  double as_number(const std::string& key) const {
    const json& v = j_.at(key);
    if (!v.is_number()) throw ConfigError(key_path(key) + ": expected a number");
    return v.get<double>();
  }
  std::int64_t as_integer(const std::string& key) const {
    const json& v = j_.at(key);
    if (!v.is_number_integer())
      throw ConfigError(key_path(key) + ": expected an integer");
    return v.get<std::int64_t>();
  }
  std::string as_string(const std::string& key) const {
    const json& v = j_.at(key);
    if (!v.is_string()) throw ConfigError(key_path(key) + ": expected a string");
    return v.get<std::string>();
  }

  json j_;
  std::string path_;
  std::set<std::string> consumed_;
};

}  // namespace sslc::jsonio
