#pragma once

#include <algorithm>
#include <initializer_list>
#include <string>
#include <string_view>

#include <json.hpp>

#include "errors.hpp"

namespace dismesh {

/// Rejects any key of `obj` not listed in `allowed`, naming it.
inline void reject_unknown_keys(const nlohmann::json& obj, std::initializer_list<std::string_view> allowed,
                                std::string_view context) {
    if (!obj.is_object()) throw ValidationError(std::string(context) + ": expected a JSON object");
    for (const auto& [key, _] : obj.items())
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
            throw ValidationError(std::string(context) + ": unknown key '" + key + "'");
}

/// Reads obj[key] into `out` when present; type errors become ValidationError.
template <typename V>
void read_optional(const nlohmann::json& obj, const char* key, V& out, std::string_view context) {
    if (!obj.contains(key)) return;
    try {
        out = obj.at(key).get<V>();
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string(context) + "." + key + ": " + e.what());
    }
}

}  // namespace dismesh
