#include "csmri/png.hpp"

#include <zlib.h>

#include <cstring>
#include <vector>

#include "csmri/errors.hpp"
#include "csmri/io.hpp"

namespace csmri::cli {
namespace {

void push_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v >> 24));
  out.push_back(static_cast<uint8_t>(v >> 16));
  out.push_back(static_cast<uint8_t>(v >> 8));
  out.push_back(static_cast<uint8_t>(v));
}

void push_chunk(std::vector<uint8_t>& out, const char type[4],
                std::span<const uint8_t> payload) {
  push_u32(out, static_cast<uint32_t>(payload.size()));
  const size_t crc_start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  const uint32_t crc = static_cast<uint32_t>(
      ::crc32(0, out.data() + crc_start, static_cast<uInt>(out.size() - crc_start)));
  push_u32(out, crc);
}

}  // namespace

void write_png_rgb8(const std::filesystem::path& path, int width, int height,
                    std::span<const uint8_t> rgb) {
  if (rgb.size() != static_cast<size_t>(width) * height * 3) {
    throw ContractError("write_png_rgb8: buffer does not match extent");
  }

  // Filter byte 0 in front of every scanline.
  std::vector<uint8_t> raw;
  raw.reserve(static_cast<size_t>(height) * (1 + static_cast<size_t>(width) * 3));
  for (int r = 0; r < height; ++r) {
    raw.push_back(0);
    const uint8_t* row = rgb.data() + static_cast<size_t>(r) * width * 3;
    raw.insert(raw.end(), row, row + static_cast<size_t>(width) * 3);
  }
  uLongf compressed_size = compressBound(static_cast<uLong>(raw.size()));
  std::vector<uint8_t> compressed(compressed_size);
  if (compress2(compressed.data(), &compressed_size, raw.data(), static_cast<uLong>(raw.size()),
                6) != Z_OK) {
    throw IoError("png: zlib compression failed");
  }
  compressed.resize(compressed_size);

  std::vector<uint8_t> out{0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  std::vector<uint8_t> ihdr;
  push_u32(ihdr, static_cast<uint32_t>(width));
  push_u32(ihdr, static_cast<uint32_t>(height));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // color type: truecolor
  ihdr.push_back(0);   // compression
  ihdr.push_back(0);   // filter
  ihdr.push_back(0);   // interlace
  push_chunk(out, "IHDR", ihdr);
  push_chunk(out, "IDAT", compressed);
  push_chunk(out, "IEND", {});
  write_bytes(path, out.data(), out.size());
}

}  // namespace csmri::cli
