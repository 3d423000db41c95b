#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "vicregl/data.hpp"
#include "vicregl/image_io.hpp"

using namespace vicregl;
namespace fs = std::filesystem;

namespace {

std::vector<std::uint8_t> slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("vrl_test_" + std::to_string(std::uint64_t(
                              std::chrono::steady_clock::now().time_since_epoch().count())));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

// reference 2x2 RGB PNG produced by an independent encoder:
// (255,0,0) (0,255,0) / (0,0,255) (255,255,0)
const std::uint8_t kRefPng[] = {
    137, 80, 78, 71, 13, 10, 26, 10, 0, 0, 0, 13, 73, 72, 68, 82, 0, 0, 0, 2,
    0, 0, 0, 2, 8, 2, 0, 0, 0, 253, 212, 154, 115, 0, 0, 0, 20, 73, 68, 65,
    84, 120, 156, 99, 248, 207, 192, 192, 0, 194, 12, 255, 255, 255, 103, 0,
    0, 30, 239, 4, 252, 163, 200, 180, 247, 0, 0, 0, 0, 73, 69, 78, 68, 174,
    66, 96, 130};

}  // namespace

TEST_CASE("reference 2x2 png decodes to the known pixel bytes") {
  std::vector<std::uint8_t> bytes(kRefPng, kRefPng + sizeof(kRefPng));
  ImageU8 img = decode_png(bytes);
  REQUIRE(img.width == 2);
  REQUIRE(img.height == 2);
  REQUIRE(img.channels == 3);
  CHECK(img.at(0, 0, 0) == 255);
  CHECK(img.at(0, 0, 1) == 0);
  CHECK(img.at(0, 1, 1) == 255);
  CHECK(img.at(1, 0, 2) == 255);
  CHECK(img.at(1, 1, 0) == 255);
  CHECK(img.at(1, 1, 1) == 255);
  CHECK(img.at(1, 1, 2) == 0);
}

TEST_CASE("our png encoder round-trips through our decoder") {
  ImageU8 img;
  img.width = 5;
  img.height = 3;
  img.channels = 3;
  img.pixels.resize(45);
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    img.pixels[i] = std::uint8_t((i * 37 + 11) % 256);
  const auto bytes = encode_png(img);
  ImageU8 back = decode_png(bytes);
  REQUIRE(back.width == img.width);
  REQUIRE(back.height == img.height);
  CHECK(back.pixels == img.pixels);

  // encoding is byte-stable
  CHECK(encode_png(img) == bytes);
}

TEST_CASE("png directory loading decodes to [0,1] arrays sorted by filename") {
  TempDir tmp;
  ImageU8 a;
  a.width = a.height = 2;
  a.channels = 3;
  a.pixels = {255, 0, 0, 0, 255, 0, 0, 0, 255, 255, 255, 0};
  ImageU8 b = a;
  b.pixels[0] = 10;
  write_png((tmp.path / "b_second.png").string(), b);
  write_png((tmp.path / "a_first.png").string(), a);

  Dataset ds = load_dataset(tmp.path.string());
  REQUIRE(ds.size() == 2);
  CHECK(ds.samples[0].pixels.at3(0, 0, 0) == doctest::Approx(1.0));  // a_first
  CHECK(ds.samples[1].pixels.at3(0, 0, 0) == doctest::Approx(10.0 / 255.0));
  CHECK(ds.samples[0].pixels.at3(1, 0, 1) == doctest::Approx(1.0));
}

TEST_CASE("shapes generation: masks mark shape interiors, label is dominant kind") {
  ShapesConfig cfg;
  cfg.seed = 5;
  for (std::uint64_t i = 0; i < 20; ++i) {
    SeedSample s = make_shapes_sample(cfg, i);
    REQUIRE(s.mask.size() == cfg.canvas * cfg.canvas);
    REQUIRE(s.has_label());
    CHECK(s.label >= 1);
    CHECK(s.label <= 3);
    std::size_t shape_pixels = 0;
    for (auto m : s.mask) {
      CHECK(m <= 3);
      if (m > 0) ++shape_pixels;
    }
    CHECK(shape_pixels > 0);
    for (std::size_t k = 0; k < s.pixels.numel(); ++k) {
      CHECK(s.pixels[k] >= 0.0);
      CHECK(s.pixels[k] <= 1.0);
    }
  }
}

TEST_CASE("same seed produces byte-identical dataset files") {
  TempDir tmp;
  ShapesConfig cfg;
  cfg.seed = 7;
  const auto p1 = (tmp.path / "a.vdsb").string();
  const auto p2 = (tmp.path / "b.vdsb").string();
  gen_shapes(cfg, 25, p1);
  gen_shapes(cfg, 25, p2);
  CHECK(slurp(p1) == slurp(p2));

  ShapesConfig other = cfg;
  other.seed = 8;
  const auto p3 = (tmp.path / "c.vdsb").string();
  gen_shapes(other, 25, p3);
  CHECK(slurp(p1) != slurp(p3));
}

TEST_CASE("dataset round-trips through the file format") {
  TempDir tmp;
  ShapesConfig cfg;
  cfg.seed = 11;
  const auto path = (tmp.path / "ds.vdsb").string();
  gen_shapes(cfg, 10, path);
  Dataset ds = load_dataset(path);
  REQUIRE(ds.size() == 10);
  CHECK(ds.class_count == ShapesConfig::kNumClasses);
  CHECK(ds.has_masks);
  CHECK(ds.has_labels);
  for (std::uint64_t i = 0; i < 10; ++i) {
    SeedSample ref = make_shapes_sample(cfg, i);
    const SeedSample& got = ds.samples[i];
    CHECK(got.label == ref.label);
    CHECK(got.mask == ref.mask);
    for (std::size_t k = 0; k < ref.pixels.numel(); ++k)
      CHECK(std::abs(got.pixels[k] - ref.pixels[k]) <= 0.5 / 255.0 + 1e-12);
  }
}

TEST_CASE("truncated dataset files are rejected with a format error") {
  TempDir tmp;
  ShapesConfig cfg;
  const auto path = (tmp.path / "ds.vdsb").string();
  gen_shapes(cfg, 5, path);
  auto bytes = slurp(path);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  os.write(reinterpret_cast<const char*>(bytes.data()),
           std::streamsize(bytes.size() - 100));
  os.close();
  CHECK_THROWS_WITH_AS(load_dataset(path),
                       doctest::Contains("does not match header"), std::runtime_error);

  // bad magic
  bytes[0] = 'X';
  std::ofstream os2(path, std::ios::binary | std::ios::trunc);
  os2.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  os2.close();
  CHECK_THROWS_WITH_AS(load_dataset(path), doctest::Contains("bad magic"),
                       std::runtime_error);
}

TEST_CASE("per-class pixel frequencies stay within 20% of the analytic expectation") {
  ShapesConfig cfg;
  cfg.seed = 13;
  const auto expected = cfg.expected_class_fractions();
  std::vector<std::size_t> counts(ShapesConfig::kNumClasses, 0);
  const std::size_t n = 1000;
  for (std::uint64_t i = 0; i < n; ++i) {
    SeedSample s = make_shapes_sample(cfg, i);
    for (auto m : s.mask) ++counts[m];
  }
  const double total = double(n) * double(cfg.canvas) * double(cfg.canvas);
  for (std::size_t c = 0; c < ShapesConfig::kNumClasses; ++c) {
    const double got = double(counts[c]) / total;
    CHECK(got > 0.8 * expected[c]);
    CHECK(got < 1.2 * expected[c]);
  }
}
