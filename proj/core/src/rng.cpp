#include "csmri/rng.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "csmri/errors.hpp"
#include "csmri/io.hpp"

namespace csmri {
namespace {

uint64_t splitmix64(uint64_t& x) {
  x += 0x9e3779b97f4a7c15ull;
  uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace

RngStream::RngStream(uint64_t seed) {
  uint64_t sm = seed;
  for (auto& s : s_) s = splitmix64(sm);
}

uint64_t RngStream::next_u64() {
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

double RngStream::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

uint64_t RngStream::uniform_int(uint64_t n) {
  return n == 0 ? 0 : next_u64() % n;
}

double RngStream::normal() {
  // u1 in (0,1] keeps the log finite.
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::vector<size_t> RngStream::permutation(size_t n) {
  std::vector<size_t> idx(n);
  for (size_t i = 0; i < n; ++i) idx[i] = i;
  for (size_t i = n; i > 1; --i) {
    size_t j = uniform_int(i);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

std::string RngStream::state() const {
  std::string out;
  for (auto s : s_) {
    if (!out.empty()) out += ':';
    out += hex64(s);
  }
  return out;
}

void RngStream::set_state(const std::string& s) {
  std::istringstream is(s);
  std::string part;
  for (auto& word : s_) {
    if (!std::getline(is, part, ':') || part.size() != 16) {
      throw IoError("malformed rng state: " + s);
    }
    word = std::stoull(part, nullptr, 16);
  }
}

RngStream& RngSet::stream(const std::string& name) {
  auto it = streams_.find(name);
  if (it == streams_.end()) {
    it = streams_.emplace(name, derive(root_seed_, name)).first;
  }
  return it->second;
}

RngStream RngSet::derive(uint64_t root_seed, const std::string& name, uint64_t index) {
  uint64_t h = fnv1a(name.data(), name.size());
  uint64_t mix = root_seed ^ rotl(h, 13) ^ (0x9e3779b97f4a7c15ull * (index + 1));
  return RngStream(mix);
}

std::map<std::string, std::string> RngSet::states() const {
  std::map<std::string, std::string> out;
  for (const auto& [name, stream] : streams_) out[name] = stream.state();
  return out;
}

void RngSet::restore(const std::map<std::string, std::string>& states) {
  for (const auto& [name, state] : states) stream(name).set_state(state);
}

}  // namespace csmri
