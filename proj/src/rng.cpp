#include "nullport/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace nullport {

namespace {

std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

}  // namespace

std::uint64_t SeededRng::next_u64() {
    ++counter_;
    return mix64(seed_ + 0x9E3779B97F4A7C15ull * counter_);
}

double SeededRng::next_unit() {
    return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
}

double SeededRng::next_normal() {
    const double u1 = next_unit();
    const double u2 = next_unit();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t SeededRng::next_below(std::uint64_t k) {
    if (k == 0) throw std::invalid_argument("next_below requires k > 0");
    const std::uint64_t threshold = (0 - k) % k;
    std::uint64_t r;
    do {
        r = next_u64();
    } while (r < threshold);
    return r % k;
}

Tensor SeededRng::normal(std::vector<std::size_t> shape) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = next_normal();
    return t;
}

std::vector<std::size_t> SeededRng::shuffle(std::size_t count) {
    std::vector<std::size_t> idx(count);
    for (std::size_t i = 0; i < count; ++i) idx[i] = i;
    for (std::size_t i = count; i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(next_below(i));
        std::swap(idx[i - 1], idx[j]);
    }
    return idx;
}

SeededRng SeededRng::fork(std::uint64_t stream) const {
    return SeededRng(mix64(seed_ + 0xD1B54A32D192ED03ull * (stream + 1)));
}

}  // namespace nullport
