#pragma once

#include "speechssl/encoder.hpp"
#include "speechssl/rng.hpp"

#include <string_view>
#include <vector>

namespace fixture {

/// Hash of every value byte in the given tensors, in order.
inline std::uint64_t parameter_hash(const std::vector<speechssl::Param<float>*>& params) {
    std::uint64_t h = 0;
    for (const auto* p : params) {
        const std::string_view bytes(reinterpret_cast<const char*>(p->value.data()),
                                     static_cast<std::size_t>(p->value.size()) * sizeof(float));
        h = speechssl::splitmix64(h ^ speechssl::hash_string(p->name) ^ speechssl::hash_string(bytes));
    }
    return h;
}

}  // namespace fixture
