#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace flakelab {

// Error hierarchy. Everything user-facing throws one of these so the CLI can
// map validation failures vs. runtime failures onto distinct exit codes.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ParseError : Error {
    using Error::Error;
};
struct RangeError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct ShapeError : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};
struct DomainError : Error {
    using Error::Error;
};

// Deterministic 64-bit RNG (splitmix64 core). std::uniform_*_distribution is
// implementation-defined, so all sampling goes through this to keep datasets
// byte-identical across compilers.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [lo, hi] inclusive.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        const std::uint64_t span = std::uint64_t(hi - lo) + 1;
        return lo + std::int64_t(next_u64() % span);
    }

    // log-uniform in [lo, hi], lo > 0.
    double log_uniform(double lo, double hi);

    // Standard normal via Box-Muller (always consumes two draws).
    double normal();

    // Index in [0, n) weighted by non-negative weights.
    std::size_t weighted_index(const std::vector<double>& weights);

private:
    std::uint64_t state_;
};

// FNV-1a, used for config/dataset/checkpoint fingerprints.
std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a(const std::string& s);

// Combine two hashes/seeds into a new deterministic seed.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

std::string to_hex(std::uint64_t v);

// Hash of a file's raw bytes; throws IoError if unreadable.
std::uint64_t hash_file(const std::filesystem::path& path);

// Reads a whole file; throws IoError with the path on failure.
std::string read_text_file(const std::filesystem::path& path);

// Writes text atomically enough for our purposes (truncate + write).
void write_text_file(const std::filesystem::path& path, const std::string& content);

}  // namespace flakelab
