#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace csmri {

// xoshiro256** with splitmix64 seeding. Self-contained so that sequences are
// identical across platforms and the state serializes to four words.
class RngStream {
 public:
  RngStream() : RngStream(0) {}
  explicit RngStream(uint64_t seed);

  uint64_t next_u64();
  // Uniform in [0, 1), 53-bit resolution.
  double uniform();
  // Uniform integer in [0, n).
  uint64_t uniform_int(uint64_t n);
  // Box-Muller; one fresh draw per call, no cached second value.
  double normal();
  double normal(double mean, double std) { return mean + std * normal(); }
  bool bernoulli(double p) { return uniform() < p; }

  // Fisher-Yates over indices 0..n-1.
  std::vector<size_t> permutation(size_t n);

  std::string state() const;
  void set_state(const std::string& s);

 private:
  uint64_t s_[4];
};

// Registry of independently seeded named streams ("data", "dropout", "init",
// "masks", "replay", ...). A stream's seed depends only on (root seed, name),
// so creation order does not matter.
class RngSet {
 public:
  explicit RngSet(uint64_t root_seed = 0) : root_seed_(root_seed) {}

  uint64_t root_seed() const { return root_seed_; }
  RngStream& stream(const std::string& name);

  // Derives a one-off stream without registering it (per-image substreams).
  static RngStream derive(uint64_t root_seed, const std::string& name, uint64_t index = 0);

  std::map<std::string, std::string> states() const;
  void restore(const std::map<std::string, std::string>& states);

 private:
  uint64_t root_seed_;
  std::map<std::string, RngStream> streams_;
};

}  // namespace csmri
