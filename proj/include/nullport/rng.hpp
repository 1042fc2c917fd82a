#pragma once

#include <cstdint>
#include <vector>

#include "nullport/tensor.hpp"

namespace nullport {

// Counter-based splitmix64 generator. The draw at position i depends only on
// (seed, i), so streams replay identically regardless of what happened to any
// other generator instance.
class SeededRng {
public:
    explicit SeededRng(std::uint64_t seed) : seed_(seed) {}

    std::uint64_t next_u64();

    // Uniform draw in (0, 1].
    double next_unit();

    // Standard normal via Box-Muller. Always consumes exactly two uniform
    // draws and keeps no cached second value, so the stream position is a
    // pure function of the number of calls.
    double next_normal();

    // Uniform integer in [0, k) with rejection sampling (no modulo bias).
    std::uint64_t next_below(std::uint64_t k);

    Tensor normal(std::vector<std::size_t> shape);

    // Fisher-Yates permutation of 0..count-1.
    std::vector<std::size_t> shuffle(std::size_t count);

    // Derived generator for an independent named substream.
    SeededRng fork(std::uint64_t stream) const;

    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
};

}  // namespace nullport
