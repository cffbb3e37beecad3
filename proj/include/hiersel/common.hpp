#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace hiersel {

inline constexpr const char* kVersion = "0.1.0";

// Exit-code contract: 0 success, 2 config/schema, 3 guard violation,
// 4 internal invariant breach.
struct Error : std::runtime_error {
    int exit_code;
    Error(int code, const std::string& msg) : std::runtime_error(msg), exit_code(code) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(2, msg) {}
};
struct SchemaError : Error {
    explicit SchemaError(const std::string& msg) : Error(2, msg) {}
};
struct DimensionError : Error {
    explicit DimensionError(const std::string& msg) : Error(2, msg) {}
};
struct RoleError : Error {
    explicit RoleError(const std::string& msg) : Error(2, msg) {}
};
struct GuardError : Error {
    explicit GuardError(const std::string& msg) : Error(3, msg) {}
};
struct InvariantError : Error {
    explicit InvariantError(const std::string& msg) : Error(4, msg) {}
};

// splitmix64 finalizer; decorrelates seeds derived from a master seed
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
    return mix64(master ^ mix64(stream));
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a, std::uint64_t b) {
    return derive_seed(derive_seed(master, a), b);
}

} // namespace hiersel
