#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <utility>
#include <vector>

namespace lesionformer {

// Every random stream in the project is keyed by (root seed, purpose string,
// optional indices). Re-running one pipeline stage never disturbs the streams
// of another, and resuming at epoch N re-derives exactly the epoch-N streams.
std::uint64_t derive_seed(std::uint64_t root, std::string_view purpose);
std::uint64_t derive_seed(std::uint64_t root, std::string_view purpose, std::uint64_t a);
std::uint64_t derive_seed(std::uint64_t root, std::string_view purpose, std::uint64_t a,
                          std::uint64_t b);

// mt19937_64 with hand-rolled distributions. std::uniform_real_distribution
// and friends are implementation-defined, which would break cross-toolchain
// reproducibility of seeds recorded in manifests.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n), unbiased via rejection
  std::int64_t uniform_int(std::int64_t n);

  double normal();
  // Resamples until |z| <= clip, then scales by stddev.
  double truncated_normal(double stddev, double clip = 2.0);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_int(static_cast<std::int64_t>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace lesionformer
