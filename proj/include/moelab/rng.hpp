#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace moelab {

// Deterministic random source. The core engine is std::mt19937_64, whose
// output sequence is fully specified by the C++ standard, so identical seeds
// give bit-identical streams on every platform. All distributions are
// implemented here by hand (the standard library ones are not portable):
//   uniform():     high 53 bits of one engine draw, divided by 2^53
//   normal():      Box-Muller on two uniform draws, with a cached spare
//   uniform_int(): bitmask rejection sampling, no modulo bias
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform double in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * (1.0 / 9007199254740992.0);
  }

  // Standard normal via Box-Muller; generates pairs, caches the second.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  // Uniform integer in [0, n). n must be positive.
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n <= 1) return 0;
    std::uint64_t mask = ~std::uint64_t{0} >> std::countl_zero(n - 1);
    std::uint64_t draw;
    do {
      draw = next_u64() & mask;
    } while (draw >= n);
    return draw;
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Child stream for a named purpose (and optional index), so that e.g. the
  // dropout stream is independent of the data-order stream. Derivation is
  // splitmix64 over seed ^ fnv1a(label) ^ mixed index; depends only on the
  // root seed, never on how much of this stream was consumed.
  Rng derive(std::string_view label, std::uint64_t index = 0) const {
    std::uint64_t h = fnv1a(label);
    std::uint64_t s = splitmix64(seed_ ^ h);
    s = splitmix64(s ^ (index * 0x9E3779B97F4A7C15ull + 0x243F6A8885A308D3ull));
    return Rng(s);
  }

  static std::uint64_t fnv1a(std::string_view text) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (char c : text) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001B3ull;
    }
    return h;
  }

  static std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace moelab
