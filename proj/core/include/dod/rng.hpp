#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

#include "dod/tensor.hpp"

namespace dod {

/// splitmix64 finalizer.
std::uint64_t mix64(std::uint64_t x);

/// Order-sensitive hash of a list of integers; used for per-task and per-parameter seeds.
std::uint64_t hash_seed(std::initializer_list<std::uint64_t> parts);

/// FNV-1a over a string, for naming-derived seeds.
std::uint64_t hash_string(std::string_view s);

/// Seeded generator with platform-independent uniform and normal draws.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform on [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  /// Standard normal via Box-Muller.
  double normal();
  Tensor normal_tensor(Shape shape);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace dod
