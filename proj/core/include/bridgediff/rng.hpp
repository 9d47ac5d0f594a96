#pragma once

#include <cstdint>

namespace bridgediff {

// Counter-based random stream (Philox 4x32-10). A draw is a pure function of
// (seed, stream id, counter), so any stream can be replayed bit-exactly and
// independent streams are obtained by picking distinct ids.
class RngStream {
public:
    RngStream() : RngStream(0, 0) {}
    RngStream(uint64_t seed, uint64_t stream_id);

    // Derives an independent child stream; deterministic in (parent id, tag).
    RngStream split(uint64_t tag) const;

    uint32_t next_u32();
    uint64_t next_u64();
    double uniform();               // [0, 1)
    double normal();                // standard normal, Box-Muller
    uint64_t uniform_int(uint64_t n);  // [0, n)

    uint64_t seed() const { return seed_; }
    uint64_t stream_id() const { return stream_; }
    uint64_t counter() const { return counter_; }
    void set_counter(uint64_t c) { counter_ = c; }

private:
    uint64_t seed_ = 0;
    uint64_t stream_ = 0;
    uint64_t counter_ = 0;  // index of the next 32-bit word
};

uint64_t mix64(uint64_t x);  // splitmix64 finalizer

}  // namespace bridgediff
