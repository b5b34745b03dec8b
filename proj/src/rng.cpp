#include "fedrco/rng.hpp"

namespace fedrco {
namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t round,
                          std::uint64_t client, StreamTag tag) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ round);
  h = splitmix64(h ^ (client + 0x5bd1e995ULL));
  h = splitmix64(h ^ static_cast<std::uint64_t>(tag));
  return h;
}

}  // namespace fedrco
