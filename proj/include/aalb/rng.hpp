#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "aalb/tensor.hpp"

namespace aalb {

/// Seeded generator with platform-independent draws. std::mt19937_64 is
/// fully specified; the standard distributions are not, so the conversions
/// to uniform and normal variates are done here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  Tensor normal_tensor(Shape shape, double scale);
  Tensor uniform_tensor(Shape shape, double lo, double hi);
  std::vector<std::size_t> permutation(std::size_t n);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Derives an independent stream seed from a base seed and a stream tag.
std::uint64_t mix_seed(std::uint64_t base, std::uint64_t stream);

}  // namespace aalb
