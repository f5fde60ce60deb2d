#pragma once

#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace punet {

// Error taxonomy. Everything thrown on purpose derives from punet::error so
// callers (CLI, tests) can map failures to exit codes.
struct error : std::runtime_error {
    explicit error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad config values, bad shapes at API boundaries, unknown names.
struct validation_error : error {
    explicit validation_error(const std::string& msg) : error(msg) {}
};

// Geometry that cannot be tiled/partitioned (non-divisible sizes etc).
struct geometry_error : validation_error {
    explicit geometry_error(const std::string& msg) : validation_error(msg) {}
};

// File IO, checksum mismatches, malformed containers.
struct io_error : error {
    explicit io_error(const std::string& msg) : error(msg) {}
};

// NaN/Inf detected in a training step or a numeric routine diverged.
struct numeric_error : error {
    explicit numeric_error(const std::string& msg) : error(msg) {}
};

inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t seed = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string fnv1a64_hex(const void* data, std::size_t n) {
    static const char* digits = "0123456789abcdef";
    std::uint64_t h = fnv1a64(data, n);
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = digits[h & 0xf];
        h >>= 4;
    }
    return s;
}

inline std::string fnv1a64_hex(const std::string& s) {
    return fnv1a64_hex(s.data(), s.size());
}

// Little-endian float32 packing used by checkpoints and the data container.
inline void append_f32le(std::vector<unsigned char>& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    out.push_back(static_cast<unsigned char>(bits & 0xff));
    out.push_back(static_cast<unsigned char>((bits >> 8) & 0xff));
    out.push_back(static_cast<unsigned char>((bits >> 16) & 0xff));
    out.push_back(static_cast<unsigned char>((bits >> 24) & 0xff));
}

inline float read_f32le(const unsigned char* p) {
    std::uint32_t bits = static_cast<std::uint32_t>(p[0]) |
                         (static_cast<std::uint32_t>(p[1]) << 8) |
                         (static_cast<std::uint32_t>(p[2]) << 16) |
                         (static_cast<std::uint32_t>(p[3]) << 24);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

}  // namespace punet
