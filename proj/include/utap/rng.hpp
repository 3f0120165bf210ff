#pragma once

#include <cstdint>
#include <vector>

namespace utap {

// Counter-based splittable PRNG built on the splitmix64 finalizer.
// Draw i of stream (seed) is mix64(seed + (i+1) * GAMMA); split(tag) derives
// an independent stream from (seed, tag). Integer arithmetic only, so
// sequences are identical across platforms and compilers.
class Rng {
 public:
  static constexpr uint64_t kGamma = 0x9e3779b97f4a7c15ull;

  explicit Rng(uint64_t seed) : seed_(seed) {}

  static constexpr uint64_t mix64(uint64_t z) {
    z ^= z >> 30;
    z *= 0xbf58476d1ce4e5b9ull;
    z ^= z >> 27;
    z *= 0x94d049bb133111ebull;
    z ^= z >> 31;
    return z;
  }

  uint64_t next_u64() { return mix64(seed_ + kGamma * ++counter_); }

  // Uniform in [0,1) with 24 bits of mantissa.
  float next_float() {
    return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f;
  }

  float uniform(float lo, float hi) { return lo + (hi - lo) * next_float(); }

  // Uniform in [0,n) via multiply-shift. n must be positive.
  int next_int(int n) {
    return static_cast<int>((static_cast<unsigned __int128>(next_u64()) *
                             static_cast<uint64_t>(n)) >>
                            64);
  }

  bool bernoulli(float p) { return next_float() < p; }

  // Independent child stream; advancing the child never touches the parent.
  Rng split(uint64_t tag) const {
    return Rng(mix64(seed_ ^ mix64(tag + kGamma)));
  }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (int i = static_cast<int>(items.size()) - 1; i > 0; --i) {
      int j = next_int(i + 1);
      std::swap(items[i], items[static_cast<size_t>(j)]);
    }
  }

  uint64_t seed() const { return seed_; }

 private:
  uint64_t seed_;
  uint64_t counter_ = 0;
};

}  // namespace utap
