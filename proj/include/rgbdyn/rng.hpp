#pragma once

#include <cstdint>
#include <limits>
#include <string_view>

namespace rgbdyn {

// Counter-based 64-bit generator. Every output is a pure function of
// (key, counter), and the key is derived from the user seed plus a subsystem
// name, so each subsystem draws from its own reproducible stream.
class Rng {
 public:
  using result_type = std::uint64_t;

  Rng(std::uint64_t seed, std::string_view stream);

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() { return at(counter_++); }
  result_type at(std::uint64_t counter) const;

  // Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Standard normal via Box-Muller; consumes two counters per draw.
  double normal();
  std::uint64_t below(std::uint64_t n);

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

  // Child stream for a sub-task (e.g. one HPO trial) that does not perturb
  // the parent's counter.
  Rng derive(std::string_view name, std::uint64_t index = 0) const;

 private:
  Rng(std::uint64_t key) : key_(key) {}
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

std::uint64_t hash_name(std::string_view name);
std::uint64_t mix64(std::uint64_t x);

}  // namespace rgbdyn
