#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace gsaflow {

// Shape/dimension violations (mismatched operands, bad axes).
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Violated preconditions that are not shape-related.
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// File format / persistence failures.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite losses or failed numerical checks; maps to its own exit code.
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void check_contract(bool ok, const std::string &msg) {
    if (!ok) throw ContractError(msg);
}

inline void check_shape(bool ok, const std::string &msg) {
    if (!ok) throw ShapeError(msg);
}

// FNV-1a, used for checkpoint content hashes and freeze checks.
inline uint64_t fnv1a(const void *data, size_t len, uint64_t seed = 0xcbf29ce484222325ull) {
    const auto *p = static_cast<const unsigned char *>(data);
    uint64_t h = seed;
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string hex64(uint64_t h) {
    static const char *digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[i] = digits[h & 0xf];
        h >>= 4;
    }
    return s;
}

}  // namespace gsaflow
