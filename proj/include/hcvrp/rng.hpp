#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "hcvrp/common.hpp"

namespace hcvrp {

// splitmix64; used to derive independent stream seeds from a master seed.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream,
                                 std::uint64_t index = 0) {
  return mix64(mix64(master ^ mix64(stream)) ^ index);
}

// Deterministic RNG stream. All sampling goes through the helpers below so
// that results do not depend on the standard library's distribution
// implementations. State round-trips through text for checkpointing.
class Rng {
 public:
  Rng() : engine_(0x853c49e6748fea9bULL) {}
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t bits() { return engine_(); }

  // Uniform on [0, 1) with 53 random bits.
  double uniform01() {
    return static_cast<double>(bits() >> 11) * 0x1.0p-53;
  }

  // Uniform on [lo, hi).
  double uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform01();
  }

  // Uniform integer in {lo, ..., hi} inclusive.
  int uniform_int(int lo, int hi) {
    require(lo <= hi, "uniform_int: empty range");
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(bits() % span);
  }

  // Index sampled from a discrete distribution given as non-negative weights
  // summing to ~1. Falls back to the last positive entry on rounding.
  int sample_index(const std::vector<double>& probs) {
    const double u = uniform01();
    double acc = 0.0;
    int last_positive = -1;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      if (probs[i] > 0.0) last_positive = static_cast<int>(i);
      acc += probs[i];
      if (u < acc) return static_cast<int>(i);
    }
    require(last_positive >= 0, "sample_index: all-zero distribution");
    return last_positive;
  }

  std::string save_state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  void load_state(const std::string& text) {
    std::istringstream is(text);
    is >> engine_;
    if (is.fail()) throw DataError("rng: malformed state string");
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace hcvrp
