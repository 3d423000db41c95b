#include "vicregl/geometry.hpp"

#include <algorithm>
#include <cmath>

namespace vicregl {

namespace {
constexpr int kPlacementRetries = 10;

double clampd(double v, double lo, double hi) { return std::min(std::max(v, lo), hi); }
}  // namespace

CropRect sample_view_spec(Rng& rng, std::pair<std::size_t, std::size_t> seed_dims,
                          std::pair<double, double> area_range,
                          std::pair<double, double> aspect_range,
                          std::pair<std::size_t, std::size_t> out_size,
                          double flip_prob) {
  const auto [seed_h, seed_w] = seed_dims;
  const auto [area_lo, area_hi] = area_range;
  const auto [ar_lo, ar_hi] = aspect_range;
  VRL_CHECK_ARG(seed_h >= 1 && seed_w >= 1, "sample_view_spec: empty seed image");
  VRL_CHECK_ARG(0.0 < area_lo && area_lo <= area_hi && area_hi <= 1.0,
                "sample_view_spec: area_range must satisfy 0 < lo <= hi <= 1");
  VRL_CHECK_ARG(0.0 < ar_lo && ar_lo <= ar_hi, "sample_view_spec: bad aspect_range");

  CropRect crop;
  crop.out_h = out_size.first;
  crop.out_w = out_size.second;
  VRL_CHECK_ARG(crop.out_h >= 1 && crop.out_w >= 1, "sample_view_spec: bad out_size");

  const double total = double(seed_h) * double(seed_w);
  for (int attempt = 0; attempt < kPlacementRetries; ++attempt) {
    const double area = rng.uniform(area_lo, area_hi) * total;
    const double ar = std::exp(rng.uniform(std::log(ar_lo), std::log(ar_hi)));
    const double w = std::sqrt(area * ar);
    const double h = std::sqrt(area / ar);
    if (w <= double(seed_w) && h <= double(seed_h)) {
      crop.crop_w = w;
      crop.crop_h = h;
      crop.x0 = rng.uniform(0.0, double(seed_w) - w);
      crop.y0 = rng.uniform(0.0, double(seed_h) - h);
      crop.hflip = rng.bernoulli(flip_prob);
      return crop;
    }
  }

  // Fallback: centered crop of maximal size at the feasible aspect ratio
  // closest to the requested range.
  const double ar = clampd(double(seed_w) / double(seed_h), ar_lo, ar_hi);
  double w = std::min(double(seed_w), double(seed_h) * ar);
  double h = w / ar;
  if (h > double(seed_h)) {
    h = double(seed_h);
    w = h * ar;
  }
  crop.crop_w = w;
  crop.crop_h = h;
  crop.x0 = (double(seed_w) - w) / 2.0;
  crop.y0 = (double(seed_h) - h) / 2.0;
  crop.hflip = rng.bernoulli(flip_prob);
  return crop;
}

namespace {

void validate_crop(const SeedSample& img, const CropRect& crop) {
  VRL_CHECK_ARG(img.pixels.rank() == 3 && img.pixels.dim(0) == 3,
                "apply_view: image must be (3,H,W)");
  VRL_CHECK_ARG(crop.crop_w > 0.0 && crop.crop_h > 0.0, "apply_view: empty crop");
  VRL_CHECK_ARG(crop.x0 >= 0.0 && crop.y0 >= 0.0 &&
                    crop.x0 + crop.crop_w <= double(img.width()) + 1e-9 &&
                    crop.y0 + crop.crop_h <= double(img.height()) + 1e-9,
                "apply_view: crop rectangle outside image");
  VRL_CHECK_ARG(crop.out_h >= 1 && crop.out_w >= 1, "apply_view: bad output size");
}

double luma(double r, double g, double b) {
  return 0.299 * r + 0.587 * g + 0.114 * b;
}

}  // namespace

Tensor apply_view(const SeedSample& img, const CropRect& crop,
                  const AugmentConfig& jitter, Rng& rng) {
  validate_crop(img, crop);
  const std::size_t H = img.height(), W = img.width();
  const std::size_t oh = crop.out_h, ow = crop.out_w;
  Tensor out({3, oh, ow});

  const double sy_scale = crop.crop_h / double(oh);
  const double sx_scale = crop.crop_w / double(ow);
  for (std::size_t i = 0; i < oh; ++i) {
    double sy = crop.y0 + (double(i) + 0.5) * sy_scale - 0.5;
    sy = clampd(sy, 0.0, double(H - 1));
    const std::size_t y0 = (std::size_t)sy;
    const std::size_t y1 = std::min(y0 + 1, H - 1);
    const double fy = sy - double(y0);
    for (std::size_t j = 0; j < ow; ++j) {
      // mirrored views sample the crop right-to-left
      const std::size_t jj = crop.hflip ? (ow - 1 - j) : j;
      double sx = crop.x0 + (double(jj) + 0.5) * sx_scale - 0.5;
      sx = clampd(sx, 0.0, double(W - 1));
      const std::size_t x0 = (std::size_t)sx;
      const std::size_t x1 = std::min(x0 + 1, W - 1);
      const double fx = sx - double(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        const double* p = img.pixels.data() + c * H * W;
        const double v = (1.0 - fy) * ((1.0 - fx) * p[y0 * W + x0] + fx * p[y0 * W + x1]) +
                         fy * ((1.0 - fx) * p[y1 * W + x0] + fx * p[y1 * W + x1]);
        out.at3(c, i, j) = v;
      }
    }
  }

  if (jitter.enabled()) {
    const double fb = rng.uniform(std::max(0.0, 1.0 - jitter.brightness),
                                  1.0 + jitter.brightness);
    const double fc = rng.uniform(std::max(0.0, 1.0 - jitter.contrast),
                                  1.0 + jitter.contrast);
    const double fs = rng.uniform(std::max(0.0, 1.0 - jitter.saturation),
                                  1.0 + jitter.saturation);
    const bool to_gray = rng.bernoulli(jitter.grayscale_prob);

    double mean_gray = 0.0;
    for (std::size_t p = 0; p < oh * ow; ++p)
      mean_gray += luma(out[p], out[oh * ow + p], out[2 * oh * ow + p]);
    mean_gray /= double(oh * ow);

    for (std::size_t p = 0; p < oh * ow; ++p) {
      double r = out[p], g = out[oh * ow + p], b = out[2 * oh * ow + p];
      r *= fb;
      g *= fb;
      b *= fb;
      const double gray = luma(r, g, b);
      r = gray + fs * (r - gray);
      g = gray + fs * (g - gray);
      b = gray + fs * (b - gray);
      r = mean_gray + fc * (r - mean_gray);
      g = mean_gray + fc * (g - mean_gray);
      b = mean_gray + fc * (b - mean_gray);
      if (to_gray) r = g = b = luma(r, g, b);
      out[p] = clampd(r, 0.0, 1.0);
      out[oh * ow + p] = clampd(g, 0.0, 1.0);
      out[2 * oh * ow + p] = clampd(b, 0.0, 1.0);
    }
  }
  return out;
}

std::vector<std::uint8_t> apply_view_mask(const std::vector<std::uint8_t>& mask,
                                          std::size_t h, std::size_t w,
                                          const CropRect& crop) {
  VRL_CHECK_ARG(mask.size() == h * w, "apply_view_mask: mask size mismatch");
  std::vector<std::uint8_t> out(crop.out_h * crop.out_w);
  for (std::size_t i = 0; i < crop.out_h; ++i) {
    double sy = crop.y0 + (double(i) + 0.5) * crop.crop_h / double(crop.out_h) - 0.5;
    const std::size_t y = (std::size_t)clampd(std::round(sy), 0.0, double(h - 1));
    for (std::size_t j = 0; j < crop.out_w; ++j) {
      const std::size_t jj = crop.hflip ? (crop.out_w - 1 - j) : j;
      double sx = crop.x0 + (double(jj) + 0.5) * crop.crop_w / double(crop.out_w) - 0.5;
      const std::size_t x = (std::size_t)clampd(std::round(sx), 0.0, double(w - 1));
      out[i * crop.out_w + j] = mask[y * w + x];
    }
  }
  return out;
}

PositionGrid position_grid(const CropRect& crop, std::size_t map_h, std::size_t map_w,
                           int view_id) {
  VRL_CHECK_ARG(map_h >= 1 && map_w >= 1, "position_grid: empty map dims");
  PositionGrid grid;
  grid.view_id = view_id;
  grid.coords = Tensor({map_h, map_w, 2});
  const double cell_h = crop.crop_h / double(map_h);
  const double cell_w = crop.crop_w / double(map_w);
  for (std::size_t i = 0; i < map_h; ++i) {
    const double row = crop.y0 + (double(i) + 0.5) * cell_h;
    for (std::size_t j = 0; j < map_w; ++j) {
      const std::size_t jj = crop.hflip ? (map_w - 1 - j) : j;
      grid.coords.at3(i, j, 0) = row;
      grid.coords.at3(i, j, 1) = crop.x0 + (double(jj) + 0.5) * cell_w;
    }
  }
  return grid;
}

}  // namespace vicregl
