#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace vicregl {

/// 8-bit interleaved image (row-major, channels last).
struct ImageU8 {
  std::size_t width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * channels + c];
  }
  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) {
    return pixels[(y * width + x) * channels + c];
  }
};

/// Decodes an 8-bit non-interlaced PNG (gray, gray+alpha, RGB or RGBA).
ImageU8 decode_png(const std::vector<std::uint8_t>& bytes);
ImageU8 read_png(const std::string& path);

/// Encodes an RGB image as PNG with uncompressed deflate blocks, so the
/// output bytes are a pure function of the pixels (stable golden files).
std::vector<std::uint8_t> encode_png(const ImageU8& img);
void write_png(const std::string& path, const ImageU8& img);

}  // namespace vicregl
