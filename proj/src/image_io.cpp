#include "vicregl/image_io.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>

#include "vicregl/common.hpp"

namespace vicregl {

namespace {

constexpr std::uint8_t kSignature[8] = {137, 80, 78, 71, 13, 10, 26, 10};

std::uint32_t read_u32_be(const std::uint8_t* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
         (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

void push_u32_be(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(std::uint8_t(v >> 24));
  out.push_back(std::uint8_t(v >> 16));
  out.push_back(std::uint8_t(v >> 8));
  out.push_back(std::uint8_t(v));
}

std::vector<std::uint8_t> zlib_inflate(const std::vector<std::uint8_t>& in,
                                       std::size_t expected) {
  std::vector<std::uint8_t> out(expected);
  uLongf out_len = uLongf(expected);
  const int rc = uncompress(out.data(), &out_len, in.data(), uLong(in.size()));
  VRL_CHECK(rc == Z_OK, "png: zlib inflate failed with code ", rc);
  VRL_CHECK(out_len == expected, "png: decompressed size ", out_len, ", expected ",
            expected);
  return out;
}

int paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

}  // namespace

ImageU8 decode_png(const std::vector<std::uint8_t>& bytes) {
  VRL_CHECK(bytes.size() > 8 && std::memcmp(bytes.data(), kSignature, 8) == 0,
            "png: bad signature");
  std::size_t pos = 8;
  ImageU8 img;
  std::size_t bit_depth = 0, color_type = 0;
  std::vector<std::uint8_t> idat;
  bool saw_ihdr = false, saw_iend = false;

  while (pos + 8 <= bytes.size() && !saw_iend) {
    const std::uint32_t len = read_u32_be(&bytes[pos]);
    VRL_CHECK(pos + 12 + len <= bytes.size(), "png: truncated chunk at byte ", pos);
    const char* type = reinterpret_cast<const char*>(&bytes[pos + 4]);
    const std::uint8_t* data = &bytes[pos + 8];
    if (std::memcmp(type, "IHDR", 4) == 0) {
      VRL_CHECK(len == 13, "png: bad IHDR length");
      img.width = read_u32_be(data);
      img.height = read_u32_be(data + 4);
      bit_depth = data[8];
      color_type = data[9];
      VRL_CHECK(bit_depth == 8, "png: only 8-bit depth supported, got ", bit_depth);
      VRL_CHECK(data[12] == 0, "png: interlaced images are not supported");
      switch (color_type) {
        case 0: img.channels = 1; break;
        case 2: img.channels = 3; break;
        case 4: img.channels = 2; break;
        case 6: img.channels = 4; break;
        default: VRL_CHECK(false, "png: unsupported color type ", color_type);
      }
      saw_ihdr = true;
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), data, data + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      saw_iend = true;
    }
    pos += 12 + len;
  }
  VRL_CHECK(saw_ihdr && saw_iend && !idat.empty(), "png: missing critical chunks");

  const std::size_t bpp = img.channels;
  const std::size_t stride = img.width * bpp;
  auto raw = zlib_inflate(idat, img.height * (stride + 1));

  img.pixels.assign(img.height * stride, 0);
  std::vector<std::uint8_t> prev(stride, 0);
  for (std::size_t y = 0; y < img.height; ++y) {
    const std::uint8_t filter = raw[y * (stride + 1)];
    const std::uint8_t* src = &raw[y * (stride + 1) + 1];
    std::uint8_t* dst = &img.pixels[y * stride];
    for (std::size_t i = 0; i < stride; ++i) {
      const int left = i >= bpp ? dst[i - bpp] : 0;
      const int up = prev[i];
      const int ul = i >= bpp ? prev[i - bpp] : 0;
      int v = src[i];
      switch (filter) {
        case 0: break;
        case 1: v += left; break;
        case 2: v += up; break;
        case 3: v += (left + up) / 2; break;
        case 4: v += paeth(left, up, ul); break;
        default: VRL_CHECK(false, "png: unknown filter ", int(filter), " in row ", y);
      }
      dst[i] = std::uint8_t(v & 0xff);
    }
    std::memcpy(prev.data(), dst, stride);
  }
  return img;
}

ImageU8 read_png(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  VRL_CHECK(is.good(), "cannot open image: ", path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                  std::istreambuf_iterator<char>());
  try {
    return decode_png(bytes);
  } catch (const std::exception& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
}

std::vector<std::uint8_t> encode_png(const ImageU8& img) {
  VRL_CHECK(img.channels == 3, "encode_png: only RGB images are written");
  const std::size_t stride = img.width * 3;

  // filter-0 scanlines
  std::vector<std::uint8_t> raw;
  raw.reserve(img.height * (stride + 1));
  for (std::size_t y = 0; y < img.height; ++y) {
    raw.push_back(0);
    raw.insert(raw.end(), &img.pixels[y * stride], &img.pixels[y * stride] + stride);
  }

  // zlib stream with stored deflate blocks: byte-stable by construction
  std::vector<std::uint8_t> z;
  z.push_back(0x78);
  z.push_back(0x01);
  std::size_t off = 0;
  while (off < raw.size()) {
    const std::size_t n = std::min<std::size_t>(65535, raw.size() - off);
    const bool last = off + n == raw.size();
    z.push_back(last ? 1 : 0);
    z.push_back(std::uint8_t(n & 0xff));
    z.push_back(std::uint8_t(n >> 8));
    z.push_back(std::uint8_t(~n & 0xff));
    z.push_back(std::uint8_t((~n >> 8) & 0xff));
    z.insert(z.end(), raw.begin() + off, raw.begin() + off + n);
    off += n;
  }
  const auto adler = (std::uint32_t)adler32(adler32(0, nullptr, 0), raw.data(),
                                            uInt(raw.size()));
  push_u32_be(z, adler);

  std::vector<std::uint8_t> out(kSignature, kSignature + 8);
  auto chunk = [&out](const char* type, const std::vector<std::uint8_t>& data) {
    push_u32_be(out, std::uint32_t(data.size()));
    const std::size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data.begin(), data.end());
    const auto c = (std::uint32_t)crc32(crc32(0, nullptr, 0), &out[start],
                                        uInt(out.size() - start));
    push_u32_be(out, c);
  };

  std::vector<std::uint8_t> ihdr;
  push_u32_be(ihdr, std::uint32_t(img.width));
  push_u32_be(ihdr, std::uint32_t(img.height));
  ihdr.insert(ihdr.end(), {8, 2, 0, 0, 0});
  chunk("IHDR", ihdr);
  chunk("IDAT", z);
  chunk("IEND", {});
  return out;
}

void write_png(const std::string& path, const ImageU8& img) {
  const auto bytes = encode_png(img);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  VRL_CHECK(os.good(), "cannot open image for writing: ", path);
  os.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  VRL_CHECK(os.good(), "write failed: ", path);
}

}  // namespace vicregl
