#include "ctxvit/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace ctxvit {

namespace {
constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;
}

std::uint64_t mix64(std::uint64_t x) {
  x ^= x >> 30;
  x *= 0xBF58476D1CE4E5B9ULL;
  x ^= x >> 27;
  x *= 0x94D049BB133111EBULL;
  x ^= x >> 31;
  return x;
}

std::uint64_t hash_bytes(std::string_view bytes, std::uint64_t seed) {
  // FNV-1a followed by a finalizer so short names still spread across bits.
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return mix64(h);
}

Rng::Rng(std::uint64_t seed) : key_(mix64(seed + kGolden)) {}

Rng Rng::split(std::string_view name) const {
  return Rng(mix64(key_ ^ hash_bytes(name)), true);
}

Rng Rng::split(std::uint64_t index) const {
  return Rng(mix64(key_ + mix64(index * kGolden + 1)), true);
}

std::uint64_t Rng::next_u64() {
  const std::uint64_t n = counter_++;
  return mix64(mix64(key_ + n * kGolden) ^ (n + 0x632BE59BD9B4E019ULL));
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) {
    u1 = uniform();
  }
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t Rng::below(std::size_t n) {
  if (n == 0) {
    throw std::invalid_argument("Rng::below: n must be positive");
  }
  // Rejection sampling keeps the draw unbiased.
  const std::uint64_t bound = n;
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  std::uint64_t x = next_u64();
  while (x >= limit) {
    x = next_u64();
  }
  return static_cast<std::size_t>(x % bound);
}

}  // namespace ctxvit
