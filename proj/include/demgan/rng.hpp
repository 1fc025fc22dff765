#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace demgan {

using Rng = std::mt19937_64;

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view text);

/// Child seed for a named consumer of the root seed. Labels are fixed strings
/// so that adding a consumer never perturbs the streams of existing ones.
std::uint64_t derive_seed(std::uint64_t root, std::string_view label);

/// Uniform integer in [0, bound) by rejection; independent of the standard
/// library's distribution implementation.
std::uint64_t uniform_index(Rng& rng, std::uint64_t bound);

/// Uniform real in [0, 1) from the top 53 bits.
double uniform01(Rng& rng);

/// Standard normal via Box-Muller.
double standard_normal(Rng& rng);

template <typename T>
void shuffle_in_place(std::vector<T>& items, Rng& rng) {
    for (std::size_t i = items.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(uniform_index(rng, i));
        std::swap(items[i - 1], items[j]);
    }
}

}  // namespace demgan
