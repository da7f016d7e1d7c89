#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "csmri/errors.hpp"

namespace csmri {

// Raw little-endian binary files. All on-disk scalar data goes through these
// helpers so the formats stay byte-stable across runs.

void write_bytes(const std::filesystem::path& path, const void* data, size_t n);
std::vector<uint8_t> read_bytes(const std::filesystem::path& path);

template <typename T>
void write_raw(const std::filesystem::path& path, const std::vector<T>& v) {
  static_assert(std::is_trivially_copyable_v<T>);
  write_bytes(path, v.data(), v.size() * sizeof(T));
}

// Reads exactly `count` scalars; throws IoError naming the file otherwise.
template <typename T>
std::vector<T> read_raw(const std::filesystem::path& path, size_t count);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

// FNV-1a over a byte buffer, used for dataset/content hashes in manifests.
uint64_t fnv1a(const void* data, size_t n, uint64_t seed = 0xcbf29ce484222325ull);
uint64_t fnv1a_file(const std::filesystem::path& path);
std::string hex64(uint64_t v);

}  // namespace csmri
