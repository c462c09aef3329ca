#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <functional>
#include <thread>
#include <vector>

namespace agrigen {

inline constexpr const char* kToolVersion = "0.1.0";

// ----------------------------------------------------------------------------
// Error types. UsageError maps to exit code 1 in the CLI, everything else
// derived from RuntimeError maps to exit code 2.
// ----------------------------------------------------------------------------

struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& m) : std::runtime_error(m) {}
};

struct RuntimeError : std::runtime_error {
    explicit RuntimeError(const std::string& m) : std::runtime_error(m) {}
};

struct ShapeError : RuntimeError {
    explicit ShapeError(const std::string& m) : RuntimeError(m) {}
};

struct DivergenceError : RuntimeError {
    explicit DivergenceError(const std::string& m) : RuntimeError(m) {}
};

struct NumericsError : RuntimeError {
    explicit NumericsError(const std::string& m) : RuntimeError(m) {}
};

struct DegenerateDataError : RuntimeError {
    explicit DegenerateDataError(const std::string& m) : RuntimeError(m) {}
};

struct IoError : RuntimeError {
    explicit IoError(const std::string& m) : RuntimeError(m) {}
};

// ----------------------------------------------------------------------------
// FNV-1a 64-bit hash. Used for config hashes, seed derivation and parameter
// checksums; stability across runs matters, cryptographic strength does not.
// ----------------------------------------------------------------------------

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a64(s.data(), s.size(), h);
}

inline std::string hash_hex(uint64_t h) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[i] = digits[h & 0xf];
        h >>= 4;
    }
    return out;
}

/// Derives a child seed from (base, tag, index). Order-independent, so work
/// items can be farmed out to threads without perturbing results.
inline uint64_t derive_seed(uint64_t base, std::string_view tag, uint64_t index = 0) {
    uint64_t h = fnv1a64(&base, sizeof(base));
    h = fnv1a64(tag, h);
    h = fnv1a64(&index, sizeof(index), h);
    return h ? h : 0x9e3779b97f4a7c15ull;
}

// ----------------------------------------------------------------------------
// Deterministic parallel map: each index writes only its own outputs, so the
// result is identical for any thread count.
// ----------------------------------------------------------------------------

inline void parallel_for(int n, const std::function<void(int)>& fn, int threads = 0) {
    if (threads <= 0) threads = static_cast<int>(std::thread::hardware_concurrency());
    if (threads <= 1 || n <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    threads = std::min(threads, n);
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(threads));
    for (int w = 0; w < threads; ++w) {
        pool.emplace_back([&, w] {
            for (int i = w; i < n; i += threads) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

} // namespace agrigen
