#include "vicregl/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "vicregl/image_io.hpp"

namespace vicregl {

namespace {

constexpr char kMagic[4] = {'V', 'D', 'S', 'B'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kFlagMasks = 1, kFlagLabels = 2;

const double kPalette[3][3] = {
    {0.85, 0.30, 0.30},  // disk
    {0.30, 0.55, 0.85},  // rectangle
    {0.85, 0.80, 0.35},  // triangle
};

double clamp01(double v) { return std::min(std::max(v, 0.0), 1.0); }

struct ShapeSpec {
  int kind;  // 0 disk, 1 rect, 2 triangle
  double cy, cx;
  double ext_y, ext_x;  // bounding half-extents
  double color[3];
};

bool bbox_overlaps(const ShapeSpec& a, const ShapeSpec& b) {
  return std::abs(a.cy - b.cy) < a.ext_y + b.ext_y + 1.0 &&
         std::abs(a.cx - b.cx) < a.ext_x + b.ext_x + 1.0;
}

bool inside_shape(const ShapeSpec& s, double y, double x) {
  const double dy = y - s.cy, dx = x - s.cx;
  switch (s.kind) {
    case 0:
      return dy * dy + dx * dx <= s.ext_y * s.ext_y;
    case 1:
      return std::abs(dy) <= s.ext_y && std::abs(dx) <= s.ext_x;
    default: {
      // apex-up triangle: width shrinks linearly toward the top vertex
      if (dy < -s.ext_y || dy > s.ext_y) return false;
      const double half_width = s.ext_x * (dy + s.ext_y) / (2.0 * s.ext_y);
      return std::abs(dx) <= half_width;
    }
  }
}

}  // namespace

std::vector<double> ShapesConfig::expected_class_fractions() const {
  const double a = min_size_frac * double(canvas);
  const double b = max_size_frac * double(canvas);
  const double mean = 0.5 * (a + b);
  const double mean_sq = (a * a + a * b + b * b) / 3.0;
  const double areas[3] = {M_PI * mean_sq, 4.0 * mean * mean, 2.0 * mean * mean};
  const double shapes_per_image = 0.5 * double(min_shapes + max_shapes);
  const double total = double(canvas) * double(canvas);
  std::vector<double> frac(kNumClasses, 0.0);
  for (int k = 0; k < 3; ++k)
    frac[k + 1] = shapes_per_image / 3.0 * areas[k] / total;
  frac[0] = 1.0 - frac[1] - frac[2] - frac[3];
  return frac;
}

SeedSample make_shapes_sample(const ShapesConfig& cfg, std::uint64_t index) {
  Rng rng(cfg.seed * 0x9e3779b97f4a7c15ull ^ (index + 1) * 0xbf58476d1ce4e5b9ull);
  const std::size_t n = cfg.canvas;

  SeedSample s;
  s.pixels = Tensor({3, n, n});
  s.mask.assign(n * n, 0);

  // low-frequency value-noise background
  const std::size_t g = cfg.background_cells + 1;
  std::vector<double> grid(3 * g * g);
  for (auto& v : grid) v = rng.uniform(cfg.background_low, cfg.background_high);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        const double fy = double(y) / double(n - 1) * double(g - 1);
        const double fx = double(x) / double(n - 1) * double(g - 1);
        const std::size_t y0 = std::min(std::size_t(fy), g - 2);
        const std::size_t x0 = std::min(std::size_t(fx), g - 2);
        const double ty = fy - double(y0), tx = fx - double(x0);
        const double* gc = grid.data() + c * g * g;
        const double v =
            (1 - ty) * ((1 - tx) * gc[y0 * g + x0] + tx * gc[y0 * g + x0 + 1]) +
            ty * ((1 - tx) * gc[(y0 + 1) * g + x0] + tx * gc[(y0 + 1) * g + x0 + 1]);
        s.pixels.at3(c, y, x) = v;
      }

  const std::size_t count =
      cfg.min_shapes + rng.below(cfg.max_shapes - cfg.min_shapes + 1);
  std::vector<ShapeSpec> placed;
  for (std::size_t i = 0; i < count; ++i) {
    ShapeSpec sp;
    sp.kind = int(rng.below(3));
    const double lo = cfg.min_size_frac * double(n), hi = cfg.max_size_frac * double(n);
    if (sp.kind == 0) {
      sp.ext_y = sp.ext_x = rng.uniform(lo, hi);
    } else {
      sp.ext_x = rng.uniform(lo, hi);
      sp.ext_y = rng.uniform(lo, hi);
    }
    for (int c = 0; c < 3; ++c)
      sp.color[c] = std::min(
          0.98, std::max(0.05, kPalette[sp.kind][c] +
                                   rng.uniform(-cfg.color_jitter, cfg.color_jitter)));
    bool ok = false;
    for (int attempt = 0; attempt < 20 && !ok; ++attempt) {
      sp.cy = rng.uniform(sp.ext_y, double(n) - sp.ext_y);
      sp.cx = rng.uniform(sp.ext_x, double(n) - sp.ext_x);
      ok = true;
      for (const auto& other : placed) ok = ok && !bbox_overlaps(sp, other);
    }
    if (ok) placed.push_back(sp);
  }

  std::vector<std::size_t> area(3, 0);
  for (const auto& sp : placed) {
    const std::size_t y_lo = std::size_t(std::max(0.0, sp.cy - sp.ext_y - 1));
    const std::size_t y_hi = std::min(n, std::size_t(sp.cy + sp.ext_y + 2));
    const std::size_t x_lo = std::size_t(std::max(0.0, sp.cx - sp.ext_x - 1));
    const std::size_t x_hi = std::min(n, std::size_t(sp.cx + sp.ext_x + 2));
    for (std::size_t y = y_lo; y < y_hi; ++y)
      for (std::size_t x = x_lo; x < x_hi; ++x)
        if (inside_shape(sp, double(y) + 0.5, double(x) + 0.5)) {
          for (std::size_t c = 0; c < 3; ++c) s.pixels.at3(c, y, x) = sp.color[c];
          s.mask[y * n + x] = std::uint8_t(sp.kind + 1);
          ++area[sp.kind];
        }
  }

  if (cfg.pixel_noise > 0.0)
    for (std::size_t i = 0; i < s.pixels.numel(); ++i)
      s.pixels[i] = clamp01(s.pixels[i] + rng.uniform(-cfg.pixel_noise, cfg.pixel_noise));

  // dominant shape kind; generation retries guarantee at least one shape
  std::size_t best = 0;
  for (std::size_t k = 1; k < 3; ++k)
    if (area[k] > area[best]) best = k;
  s.label = int(best) + 1;
  return s;
}

void gen_shapes(const ShapesConfig& cfg, std::size_t n, const std::string& path) {
  VRL_CHECK_ARG(n >= 1, "gen_shapes: sample count must be >= 1");
  Dataset ds;
  ds.class_count = ShapesConfig::kNumClasses;
  ds.has_masks = true;
  ds.has_labels = true;
  ds.samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) ds.samples.push_back(make_shapes_sample(cfg, i));
  save_dataset(ds, path);
}

namespace {

template <typename T>
void write_le(std::ostream& os, T v) {
  unsigned char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i)
    buf[i] = (unsigned char)((std::uint64_t(v) >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  unsigned char buf[sizeof(T)];
  is.read(reinterpret_cast<char*>(buf), sizeof(T));
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= std::uint64_t(buf[i]) << (8 * i);
  return T(v);
}

Dataset load_vdsb(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  VRL_CHECK(is.good(), "cannot open dataset: ", path);
  is.seekg(0, std::ios::end);
  const std::uint64_t file_len = std::uint64_t(is.tellg());
  is.seekg(0);

  char magic[4];
  is.read(magic, 4);
  VRL_CHECK(is.good() && std::memcmp(magic, kMagic, 4) == 0, "dataset ", path,
            ": bad magic (expected VDSB)");
  const auto version = read_le<std::uint32_t>(is);
  VRL_CHECK(version == kVersion, "dataset ", path, ": unsupported version ", version);
  const auto count = read_le<std::uint64_t>(is);
  const auto height = read_le<std::uint32_t>(is);
  const auto width = read_le<std::uint32_t>(is);
  const auto channels = read_le<std::uint32_t>(is);
  const auto class_count = read_le<std::uint32_t>(is);
  const auto flags = read_le<std::uint32_t>(is);
  VRL_CHECK(is.good(), "dataset ", path, ": truncated header at byte ", is.tellg());
  VRL_CHECK(channels == 3, "dataset ", path, ": expected 3 channels, got ", channels);

  const std::uint64_t header_len = 4 + 4 + 8 + 5 * 4;
  std::uint64_t per_sample = std::uint64_t(channels) * height * width;
  if (flags & kFlagMasks) per_sample += std::uint64_t(height) * width;
  if (flags & kFlagLabels) per_sample += 4;
  const std::uint64_t expected = header_len + count * per_sample;
  VRL_CHECK(file_len == expected, "dataset ", path, ": file length ", file_len,
            " does not match header (expected ", expected, " bytes; sample ",
            (file_len - header_len) / std::max<std::uint64_t>(per_sample, 1),
            " would be cut at byte ", file_len, ")");

  Dataset ds;
  ds.class_count = class_count;
  ds.has_masks = flags & kFlagMasks;
  ds.has_labels = flags & kFlagLabels;
  ds.samples.reserve(count);
  std::vector<std::uint8_t> buf(channels * height * width);
  for (std::uint64_t i = 0; i < count; ++i) {
    SeedSample s;
    is.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size()));
    s.pixels = Tensor({channels, height, width});
    for (std::size_t k = 0; k < buf.size(); ++k) s.pixels[k] = double(buf[k]) / 255.0;
    if (ds.has_masks) {
      s.mask.resize(std::size_t(height) * width);
      is.read(reinterpret_cast<char*>(s.mask.data()), std::streamsize(s.mask.size()));
    }
    if (ds.has_labels) s.label = int(read_le<std::int32_t>(is));
    VRL_CHECK(is.good(), "dataset ", path, ": truncated in sample ", i, " at byte ",
              is.tellg());
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

Dataset load_png_dir(const std::string& path) {
  namespace fs = std::filesystem;
  std::vector<std::string> files;
  for (const auto& entry : fs::directory_iterator(path)) {
    if (!entry.is_regular_file()) continue;
    std::string ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
    if (ext == ".png") files.push_back(entry.path().string());
  }
  VRL_CHECK(!files.empty(), "no .png files in directory: ", path);
  std::sort(files.begin(), files.end());

  Dataset ds;
  for (const auto& f : files) {
    ImageU8 img = read_png(f);
    SeedSample s;
    s.pixels = Tensor({3, img.height, img.width});
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x)
        for (std::size_t c = 0; c < 3; ++c) {
          const std::size_t src_c = img.channels >= 3 ? c : 0;
          s.pixels.at3(c, y, x) = double(img.at(y, x, src_c)) / 255.0;
        }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace

Dataset load_dataset(const std::string& path) {
  if (std::filesystem::is_directory(path)) return load_png_dir(path);
  return load_vdsb(path);
}

void save_dataset(const Dataset& ds, const std::string& path) {
  VRL_CHECK_ARG(!ds.samples.empty(), "save_dataset: empty dataset");
  const auto& first = ds.samples.front();
  const std::size_t h = first.height(), w = first.width();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  VRL_CHECK(os.good(), "cannot open dataset for writing: ", path);
  os.write(kMagic, 4);
  write_le<std::uint32_t>(os, kVersion);
  write_le<std::uint64_t>(os, ds.samples.size());
  write_le<std::uint32_t>(os, std::uint32_t(h));
  write_le<std::uint32_t>(os, std::uint32_t(w));
  write_le<std::uint32_t>(os, 3);
  write_le<std::uint32_t>(os, std::uint32_t(ds.class_count));
  std::uint32_t flags = 0;
  if (ds.has_masks) flags |= kFlagMasks;
  if (ds.has_labels) flags |= kFlagLabels;
  write_le<std::uint32_t>(os, flags);

  for (const auto& s : ds.samples) {
    VRL_CHECK(s.height() == h && s.width() == w,
              "save_dataset: all samples must share dimensions");
    for (std::size_t k = 0; k < s.pixels.numel(); ++k)
      os.put(char(std::uint8_t(std::lround(clamp01(s.pixels[k]) * 255.0))));
    if (ds.has_masks) {
      VRL_CHECK(s.mask.size() == h * w, "save_dataset: sample missing mask");
      os.write(reinterpret_cast<const char*>(s.mask.data()),
               std::streamsize(s.mask.size()));
    }
    if (ds.has_labels) write_le<std::int32_t>(os, std::int32_t(s.label));
  }
  VRL_CHECK(os.good(), "write failed for dataset: ", path);
}

}  // namespace vicregl
