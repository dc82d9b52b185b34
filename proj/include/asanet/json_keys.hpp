#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <initializer_list>
#include <stdexcept>
#include <string>

namespace asanet {

/// Throws std::invalid_argument naming the first key of `j` not in `allowed`.
inline void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                                const std::string& where)
{
    if (!j.is_object())
        throw std::invalid_argument(where + ": expected a JSON object");
    for (const auto& item : j.items()) {
        if (std::none_of(allowed.begin(), allowed.end(), [&](const char* k) { return item.key() == k; }))
            throw std::invalid_argument(where + ": unknown key '" + item.key() + "'");
    }
}

}  // namespace asanet
