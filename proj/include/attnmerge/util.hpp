#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace attnmerge {

// splitmix64; used to derive independent stream seeds from one user seed.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Uniform integer in [0, n) by rejection sampling on the raw engine output.
/// std::uniform_int_distribution is implementation-defined, so seeded runs
/// would not reproduce across standard libraries; this does.
std::uint64_t uniform_below(std::mt19937_64& rng, std::uint64_t n);

/// Uniform double in (0, 1].
double uniform_unit(std::mt19937_64& rng);

/// Standard normal draws via Box-Muller, again for cross-platform
/// reproducibility of seeded runs.
class NormalSampler {
  public:
    explicit NormalSampler(std::uint64_t seed) : rng_(seed) {}
    double next();
    std::mt19937_64& engine() { return rng_; }

  private:
    std::mt19937_64 rng_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// f16/bf16 <-> f32 bit conversions (scalar, little-endian element encoding).
float f16_to_f32(std::uint16_t h);
float bf16_to_f32(std::uint16_t b);

/// Shortest exact decimal form of a double ("%.17g" trimmed); strtod of the
/// result reproduces the bits, which the cache/trace files rely on.
std::string format_double(double v);

/// Percent with one decimal, e.g. 0.618 -> "61.8".
std::string format_percent(double fraction);

std::vector<std::string> split(const std::string& s, char sep);

/// Fresh unique path under the temp root (ATTNMERGE_TMPDIR overrides the
/// system default). The file is not created.
std::filesystem::path temp_path(const std::string& stem, const std::string& ext);

}  // namespace attnmerge
