#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace vlfuzz {

// Hex-encoded SHA-256 of the given bytes.
std::string sha256_hex(std::string_view bytes);

std::string base64_encode(std::string_view bytes);
// Throws std::invalid_argument on malformed input.
std::string base64_decode(std::string_view text);

std::string trim(std::string_view s);
std::string to_lower(std::string_view s);

// Shortest decimal form that parses back to the identical double.
std::string format_double(double value);

// SplitMix64 finalizer; the basis of every derived seed in the harness.
std::uint64_t mix64(std::uint64_t x);

// Folds a sequence of tags into a child seed. Strings are hashed with FNV-1a
// so derived seeds are identical on every platform.
class SeedBuilder {
 public:
  explicit SeedBuilder(std::uint64_t base) : state_(mix64(base ^ 0x5eedf00dULL)) {}

  SeedBuilder& add(std::uint64_t v) {
    state_ = mix64(state_ ^ mix64(v + 0x9e3779b97f4a7c15ULL));
    return *this;
  }
  SeedBuilder& add(std::string_view s);

  std::uint64_t seed() const { return state_; }

 private:
  std::uint64_t state_;
};

// Deterministic RNG. The engine is std::mt19937_64 (fully specified by the
// standard); the distributions are implemented here because the standard
// library's distributions are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1) with 53 bits of precision.
  double uniform();
  // Uniform integer in [0, n). n must be positive.
  std::size_t index(std::size_t n);
  double normal();
  // Index drawn proportionally to weights (nonnegative, positive sum).
  std::size_t categorical(std::span<const double> weights);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[index(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace vlfuzz
