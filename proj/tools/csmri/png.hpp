#pragma once

#include <cstdint>
#include <filesystem>
#include <span>

namespace csmri::cli {

// Minimal deterministic PNG writer (8-bit RGB, zlib level 6, filter 0).
void write_png_rgb8(const std::filesystem::path& path, int width, int height,
                    std::span<const uint8_t> rgb);

}  // namespace csmri::cli
