#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace lcf {

// xoshiro256** seeded through splitmix64.
//
// Every source of randomness in the project goes through one of these,
// keyed by an explicit 64-bit seed plus a stream tag so that e.g. Gumbel
// gate noise and data generation never share a sequence. Identical seeds
// give bit-identical output on every platform.
class Rng {
 public:
  // Stream tags, one per logical purpose.
  enum Stream : uint64_t {
    kInit = 0x11,
    kGumbel = 0x22,
    kData = 0x33,
    kDropout = 0x44,
    kShuffle = 0x55,
    kMisc = 0x66,
  };

  explicit Rng(uint64_t seed, uint64_t stream = kMisc) {
    uint64_t x = seed ^ (0x9e3779b97f4a7c15ULL * (stream + 1));
    for (auto& si : s_) si = splitmix64(x);
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in (0, 1): 53-bit mantissa, zero excluded so log() is safe.
  double uniform() {
    double u = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    return u > 0.0 ? u : 0x1.0p-53;
  }

  // Integer in [0, n).
  uint64_t uniform_int(uint64_t n) { return n ? next_u64() % n : 0; }

  // Standard normal via Box-Muller (pairs, one cached).
  float normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586 * u2;
    spare_ = static_cast<float>(r * std::sin(a));
    has_spare_ = true;
    return static_cast<float>(r * std::cos(a));
  }

  // Standard Gumbel(0,1) sample: -log(-log(U)).
  float gumbel() { return static_cast<float>(-std::log(-std::log(uniform()))); }

  bool bernoulli(double p) { return uniform() < p; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  static uint64_t splitmix64(uint64_t& x) {
    uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  uint64_t s_[4];
  float spare_ = 0.0f;
  bool has_spare_ = false;
};

}  // namespace lcf
