#include "bridgediff/rng.hpp"

#include <cmath>

namespace bridgediff {

namespace {

struct PhiloxBlock {
    uint32_t v[4];
};

inline void philox_round(uint32_t ctr[4], const uint32_t key[2]) {
    constexpr uint32_t kMul0 = 0xD2511F53u;
    constexpr uint32_t kMul1 = 0xCD9E8D57u;
    uint64_t p0 = static_cast<uint64_t>(kMul0) * ctr[0];
    uint64_t p1 = static_cast<uint64_t>(kMul1) * ctr[2];
    uint32_t hi0 = static_cast<uint32_t>(p0 >> 32), lo0 = static_cast<uint32_t>(p0);
    uint32_t hi1 = static_cast<uint32_t>(p1 >> 32), lo1 = static_cast<uint32_t>(p1);
    uint32_t n0 = hi1 ^ ctr[1] ^ key[0];
    uint32_t n2 = hi0 ^ ctr[3] ^ key[1];
    ctr[0] = n0;
    ctr[1] = lo1;
    ctr[2] = n2;
    ctr[3] = lo0;
}

// One 128-bit block of Philox 4x32-10.
PhiloxBlock philox(uint64_t seed, uint64_t stream, uint64_t block_index) {
    constexpr uint32_t kW0 = 0x9E3779B9u;
    constexpr uint32_t kW1 = 0xBB67AE85u;
    uint32_t ctr[4] = {
        static_cast<uint32_t>(block_index),
        static_cast<uint32_t>(block_index >> 32),
        static_cast<uint32_t>(stream),
        static_cast<uint32_t>(stream >> 32),
    };
    uint32_t key[2] = {static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32)};
    for (int r = 0; r < 10; ++r) {
        philox_round(ctr, key);
        key[0] += kW0;
        key[1] += kW1;
    }
    return PhiloxBlock{{ctr[0], ctr[1], ctr[2], ctr[3]}};
}

}  // namespace

uint64_t mix64(uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

RngStream::RngStream(uint64_t seed, uint64_t stream_id) : seed_(seed), stream_(stream_id) {}

RngStream RngStream::split(uint64_t tag) const {
    return RngStream(seed_, mix64(stream_ ^ mix64(tag)));
}

uint32_t RngStream::next_u32() {
    uint64_t idx = counter_++;
    PhiloxBlock b = philox(seed_, stream_, idx >> 2);
    return b.v[idx & 3];
}

uint64_t RngStream::next_u64() {
    uint64_t hi = next_u32();
    uint64_t lo = next_u32();
    return (hi << 32) | lo;
}

double RngStream::uniform() {
    return static_cast<double>(next_u32()) * 0x1p-32;
}

double RngStream::normal() {
    // Deterministic Box-Muller: two words in, one variate out.
    double u1 = (static_cast<double>(next_u32()) + 1.0) * 0x1p-32;  // (0, 1]
    double u2 = static_cast<double>(next_u32()) * 0x1p-32;          // [0, 1)
    double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(2.0 * M_PI * u2);
}

uint64_t RngStream::uniform_int(uint64_t n) {
    return n == 0 ? 0 : next_u64() % n;
}

}  // namespace bridgediff
