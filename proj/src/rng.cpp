#include "rgbdyn/rng.hpp"

#include <cmath>
#include <numbers>

namespace rgbdyn {

std::uint64_t mix64(std::uint64_t x) {
  // splitmix64 finalizer
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::uint64_t hash_name(std::string_view name) {
  // FNV-1a
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

Rng::Rng(std::uint64_t seed, std::string_view stream)
    : key_(mix64(mix64(seed) ^ hash_name(stream))) {}

Rng::result_type Rng::at(std::uint64_t counter) const {
  return mix64(key_ ^ mix64(counter + 0x632BE59BD9B4E019ull));
}

double Rng::uniform() {
  return static_cast<double>((*this)() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  double u1 = uniform();
  const double u2 = uniform();
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n <= 1) return 0;
  // rejection to avoid modulo bias
  const std::uint64_t limit = max() - (max() % n);
  std::uint64_t v;
  do {
    v = (*this)();
  } while (v >= limit);
  return v % n;
}

Rng Rng::derive(std::string_view name, std::uint64_t index) const {
  return Rng(mix64(key_ ^ hash_name(name) ^ mix64(index + 1)));
}

}  // namespace rgbdyn
