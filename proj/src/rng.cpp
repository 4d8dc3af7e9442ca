#include "lesionformer/rng.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace lesionformer {

namespace {

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

// splitmix64 finalizer
std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t root, std::string_view purpose) {
  return mix(root ^ fnv1a(purpose));
}

std::uint64_t derive_seed(std::uint64_t root, std::string_view purpose, std::uint64_t a) {
  return mix(derive_seed(root, purpose) ^ a);
}

std::uint64_t derive_seed(std::uint64_t root, std::string_view purpose, std::uint64_t a,
                          std::uint64_t b) {
  return mix(derive_seed(root, purpose, a) ^ b);
}

std::int64_t Rng::uniform_int(std::int64_t n) {
  if (n <= 0) {
    throw std::invalid_argument("Rng::uniform_int: n must be positive");
  }
  const auto un = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % un;
  std::uint64_t r;
  do {
    r = next_u64();
  } while (r >= limit);
  return static_cast<std::int64_t>(r % un);
}

double Rng::normal() {
  const double u1 = 1.0 - uniform();  // (0, 1]
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double Rng::truncated_normal(double stddev, double clip) {
  double z;
  do {
    z = normal();
  } while (std::abs(z) > clip);
  return z * stddev;
}

}  // namespace lesionformer
