#include "csmri/io.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace csmri {

void write_bytes(const std::filesystem::path& path, const void* data, size_t n) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out) throw IoError("short write: " + path.string());
}

std::vector<uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open: " + path.string());
  auto size = static_cast<size_t>(in.tellg());
  in.seekg(0);
  std::vector<uint8_t> buf(size);
  if (size > 0) in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(size));
  if (!in) throw IoError("short read: " + path.string());
  return buf;
}

template <typename T>
std::vector<T> read_raw(const std::filesystem::path& path, size_t count) {
  auto bytes = read_bytes(path);
  if (bytes.size() != count * sizeof(T)) {
    throw IoError("file " + path.string() + " holds " + std::to_string(bytes.size()) +
                  " bytes, expected " + std::to_string(count * sizeof(T)));
  }
  std::vector<T> v(count);
  if (count > 0) std::memcpy(v.data(), bytes.data(), bytes.size());
  return v;
}

template std::vector<float> read_raw<float>(const std::filesystem::path&, size_t);
template std::vector<double> read_raw<double>(const std::filesystem::path&, size_t);
template std::vector<uint8_t> read_raw<uint8_t>(const std::filesystem::path&, size_t);

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_bytes(path, text.data(), text.size());
}

std::string read_text(const std::filesystem::path& path) {
  auto bytes = read_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

uint64_t fnv1a(const void* data, size_t n, uint64_t seed) {
  const auto* p = static_cast<const uint8_t*>(data);
  uint64_t h = seed;
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

uint64_t fnv1a_file(const std::filesystem::path& path) {
  auto bytes = read_bytes(path);
  return fnv1a(bytes.data(), bytes.size());
}

std::string hex64(uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  for (int shift = 60; shift >= 0; shift -= 4) os << ((v >> shift) & 0xf);
  return os.str();
}

}  // namespace csmri
