#pragma once

#include <initializer_list>
#include <string>

#include <json.hpp>

#include "crcda/error.hpp"

namespace crcda {

using json = nlohmann::json;

namespace detail {

/// Throws ConfigError naming the first key of `j` that is not in `known`.
inline void reject_unknown_keys(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* name : known) ok = ok || k == name;
    if (!ok) throw ConfigError(where + ": unknown key '" + k + "'");
  }
}

/// Overwrites `field` with j[key] when present.
template <class F>
void read_opt(const json& j, const char* key, F& field, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    field = j.at(key).get<F>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

}  // namespace detail
}  // namespace crcda
