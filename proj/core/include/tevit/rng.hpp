#pragma once

#include <cstdint>
#include <vector>

namespace tevit {

// splitmix64; used to derive independent child seeds from a master seed.
std::uint64_t splitmix64(std::uint64_t& state);

// Deterministic generator with hand-rolled distributions so results are
// identical across standard libraries and platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  // Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi);
  // Uniform integer in [0, n).
  std::int64_t uniform_int(std::int64_t n);
  // Standard normal via Box-Muller (no cached spare; one draw per call).
  double normal();
  double normal(double mean, double stddev);
  // Derive an independent child generator (stable under call order).
  Rng fork(std::uint64_t stream_id) const;

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::int64_t i = static_cast<std::int64_t>(v.size()) - 1; i > 0; --i) {
      std::int64_t j = uniform_int(i + 1);
      std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
    }
  }

 private:
  std::uint64_t s_[4];
};

}  // namespace tevit
