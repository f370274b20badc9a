#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace uln {

using Rng = std::mt19937_64;

// splitmix64 finalizer; used to derive independent, reproducible stream seeds.
std::uint64_t mix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 1469598103934665603ULL);

// Seed for a named sub-stream, e.g. derive_seed(world_seed, "obs-noise", viewpoint).
std::uint64_t derive_seed(std::uint64_t base, std::string_view tag, std::uint64_t index = 0);

inline Rng make_rng(std::uint64_t base, std::string_view tag, std::uint64_t index = 0) {
  return Rng(derive_seed(base, tag, index));
}

double uniform01(Rng& rng);
double normal(Rng& rng, double mean = 0.0, double stddev = 1.0);
// Uniform integer in [lo, hi].
std::int64_t uniform_int(Rng& rng, std::int64_t lo, std::int64_t hi);

}  // namespace uln
