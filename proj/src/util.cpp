#include "attnmerge/util.hpp"

#include <unistd.h>

#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <numbers>
#include <sstream>

namespace attnmerge {

std::uint64_t uniform_below(std::mt19937_64& rng, std::uint64_t n) {
    if (n == 0) return 0;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
        x = rng();
    } while (x >= limit);
    return x % n;
}

double uniform_unit(std::mt19937_64& rng) {
    // 53 random bits -> (0, 1]; never returns 0 so log() below is safe.
    return (static_cast<double>(rng() >> 11) + 1.0) * 0x1.0p-53;
}

double NormalSampler::next() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    const double u1 = uniform_unit(rng_);
    const double u2 = uniform_unit(rng_);
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
}

float f16_to_f32(std::uint16_t h) {
    const std::uint32_t sign = (h & 0x8000u) << 16;
    const std::uint32_t exp = (h >> 10) & 0x1fu;
    const std::uint32_t mant = h & 0x3ffu;
    std::uint32_t bits;
    if (exp == 0) {
        if (mant == 0) {
            bits = sign;  // +-0
        } else {
            // subnormal: renormalize
            int e = -1;
            std::uint32_t m = mant;
            while ((m & 0x400u) == 0) {
                m <<= 1;
                ++e;
            }
            bits = sign | ((127 - 15 - e) << 23) | ((m & 0x3ffu) << 13);
        }
    } else if (exp == 0x1fu) {
        bits = sign | 0x7f800000u | (mant << 13);  // inf/nan
    } else {
        bits = sign | ((exp - 15 + 127) << 23) | (mant << 13);
    }
    float out;
    std::memcpy(&out, &bits, sizeof out);
    return out;
}

float bf16_to_f32(std::uint16_t b) {
    const std::uint32_t bits = static_cast<std::uint32_t>(b) << 16;
    float out;
    std::memcpy(&out, &bits, sizeof out);
    return out;
}

std::string format_double(double v) {
    char buf[64];
    // 17 significant digits round-trip any double.
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string format_percent(double fraction) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", fraction * 100.0);
    return buf;
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(s);
    while (std::getline(in, item, sep)) out.push_back(item);
    return out;
}

std::filesystem::path temp_path(const std::string& stem, const std::string& ext) {
    static std::atomic<std::uint64_t> counter{0};
    std::filesystem::path root;
    if (const char* env = std::getenv("ATTNMERGE_TMPDIR"); env && *env) {
        root = env;
    } else {
        root = std::filesystem::temp_directory_path();
    }
    const std::uint64_t n = counter.fetch_add(1);
    std::ostringstream name;
    name << stem << "_" << static_cast<unsigned long>(::getpid()) << "_" << n << ext;
    return root / name.str();
}

}  // namespace attnmerge
