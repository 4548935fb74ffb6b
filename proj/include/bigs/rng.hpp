// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>

namespace bigs {

/// Seedable generator used for every random draw in the library.
///
/// Engine: std::mt19937_64, whose output sequence is fixed by the C++
/// standard. The engine is seeded with splitmix64(seed ^ splitmix64(stream)),
/// so independent streams (per step, per shard, per layer) can be derived
/// from one user seed. Conversions to floating point are done here rather
/// than through <random> distributions, whose algorithms are
/// implementation-defined:
///   uniform()   = (next() >> 11) * 2^-53            in [0, 1)
///   normal()    = sqrt(-2 ln(1-u1)) * cos(2 pi u2)   (one Box-Muller draw)
///   below(n)    = rejection-sampled next() mod n
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

  static std::uint64_t splitmix64(std::uint64_t x);

  std::uint64_t next() { return engine_(); }
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  std::uint64_t below(std::uint64_t n);
  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace bigs
