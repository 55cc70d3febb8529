#include "ipwsae/rng.hpp"

namespace ipwsae {

namespace {
std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}
}  // namespace

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t key) {
  return splitmix64(splitmix64(seed) ^ splitmix64(key + 0x632be59bd9b4e019ULL));
}

}  // namespace ipwsae
