#pragma once

#include <cstdint>
#include <random>

namespace fedrco {

using Rng = std::mt19937_64;

// Purpose tags keep independent random streams from overlapping even when
// they share (seed, round, client).
enum class StreamTag : std::uint64_t {
  Init = 1,
  Participation = 2,
  Batching = 3,
  Partition = 4,
  DatasetMeans = 5,
  DatasetSamples = 6,
  Probe = 7,
  Fault = 8,
  Audit = 9,
};

// Counter-based split: SplitMix64 finalizer chained over the four coordinates.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t round,
                          std::uint64_t client, StreamTag tag);

inline Rng make_stream(std::uint64_t seed, std::uint64_t round,
                       std::uint64_t client, StreamTag tag) {
  return Rng(derive_seed(seed, round, client, tag));
}

}  // namespace fedrco
