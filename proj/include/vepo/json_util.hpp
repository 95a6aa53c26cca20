#pragma once

#include <initializer_list>
#include <stdexcept>
#include <string>
#include <string_view>

#include "json.hpp"

namespace vepo {

/// Invalid or unknown configuration. Maps to CLI exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace json_util {

inline void require_object(const nlohmann::json& j, std::string_view where) {
  if (!j.is_object()) throw ConfigError(std::string(where) + ": expected a JSON object");
}

inline void reject_unknown(const nlohmann::json& j, std::string_view where,
                           std::initializer_list<std::string_view> known) {
  require_object(j, where);
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool found = false;
    for (auto k : known) found = found || it.key() == k;
    if (!found) throw ConfigError(std::string(where) + ": unknown key '" + it.key() + "'");
  }
}

/// Overwrites `out` when `key` is present; type mismatches become ConfigError.
template <typename T>
void read(const nlohmann::json& j, std::string_view key, T& out, std::string_view where) {
  auto it = j.find(std::string(key));
  if (it == j.end()) return;
  try {
    out = it->template get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string(where) + "." + std::string(key) + ": " + e.what());
  }
}

}  // namespace json_util
}  // namespace vepo
