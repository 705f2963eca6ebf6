#pragma once

#include "condfem/common.hpp"

#include <algorithm>
#include <numeric>
#include <random>

namespace condfem {

inline std::vector<int> first_primes(int count) {
  std::vector<int> primes;
  int candidate = 2;
  while (static_cast<int>(primes.size()) < count) {
    bool is_prime = true;
    for (int p : primes) {
      if (p * p > candidate) break;
      if (candidate % p == 0) {
        is_prime = false;
        break;
      }
    }
    if (is_prime) primes.push_back(candidate);
    ++candidate;
  }
  return primes;
}

// Radical inverse of `index` in the given base, digits optionally permuted.
// With the identity permutation this is the plain van der Corput sequence.
inline double radical_inverse(std::uint64_t index, int base, const std::vector<int>* perm = nullptr) {
  double inv_base = 1.0 / base;
  double scale = inv_base;
  double value = 0.0;
  while (index > 0) {
    int digit = static_cast<int>(index % static_cast<std::uint64_t>(base));
    if (perm) digit = (*perm)[static_cast<std::size_t>(digit)];
    value += digit * scale;
    scale *= inv_base;
    index /= static_cast<std::uint64_t>(base);
  }
  return value;
}

// Scrambled Halton sequence: one random digit permutation per base, fixed for
// the whole sequence, seeded. Permutations keep 0 -> 0 so scrambled values of
// index 0 stay at the origin corner only if unscrambled; we skip index 0
// entirely and start at 1 so no coordinate is ever exactly 0.
class ScrambledHalton {
 public:
  ScrambledHalton(int dim, std::uint64_t seed, bool scramble = true) : bases_(first_primes(dim)) {
    if (dim < 1) throw ConfigError("halton dim must be >= 1");
    std::mt19937_64 rng(seed);
    for (int b : bases_) {
      std::vector<int> perm(static_cast<std::size_t>(b));
      std::iota(perm.begin(), perm.end(), 0);
      if (scramble) {
        // Keep perm[0] = 0 so trailing zero digits contribute nothing.
        std::shuffle(perm.begin() + 1, perm.end(), rng);
      }
      perms_.push_back(std::move(perm));
    }
  }

  int dim() const { return static_cast<int>(bases_.size()); }

  // Point `i` of the sequence (0-based caller index, internally offset by 1).
  Vec point(std::uint64_t i) const {
    Vec x(dim());
    for (int d = 0; d < dim(); ++d)
      x[d] = radical_inverse(i + 1, bases_[static_cast<std::size_t>(d)], &perms_[static_cast<std::size_t>(d)]);
    return x;
  }

  Mat points(std::uint64_t n) const {
    Mat out(static_cast<Eigen::Index>(n), dim());
    for (std::uint64_t i = 0; i < n; ++i) out.row(static_cast<Eigen::Index>(i)) = point(i).transpose();
    return out;
  }

 private:
  std::vector<int> bases_;
  std::vector<std::vector<int>> perms_;
};

inline Vec scale_to_box(const Vec& unit, const Vec& lo, const Vec& hi) {
  return lo.array() + unit.array() * (hi - lo).array();
}

}  // namespace condfem
