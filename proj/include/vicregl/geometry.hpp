#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "vicregl/rng.hpp"
#include "vicregl/tensor.hpp"

namespace vicregl {

/// One image of the training corpus: CHW pixels in [0,1], plus an optional
/// per-pixel class mask and an optional class label.
struct SeedSample {
  Tensor pixels;                // (3, H, W)
  std::vector<std::uint8_t> mask;  // H*W class ids, empty when absent
  int label = -1;               // -1 when absent

  std::size_t height() const { return pixels.dim(1); }
  std::size_t width() const { return pixels.dim(2); }
  bool has_mask() const { return !mask.empty(); }
  bool has_label() const { return label >= 0; }
};

/// Crop rectangle in seed-image pixel units, with flip flag and the output
/// resolution the view is resampled to. Coordinates are (row, col) from the
/// seed image's top-left corner, in continuous pixels.
struct CropRect {
  double x0 = 0.0, y0 = 0.0;    // top-left corner
  double crop_w = 0.0, crop_h = 0.0;
  bool hflip = false;
  std::size_t out_h = 0, out_w = 0;
};

/// Absolute seed-image coordinates of every feature-map cell of a view.
struct PositionGrid {
  Tensor coords;  // (H, W, 2): [...,0] = row, [...,1] = col
  int view_id = 0;

  std::size_t grid_h() const { return coords.dim(0); }
  std::size_t grid_w() const { return coords.dim(1); }
  double row_at(std::size_t i, std::size_t j) const { return coords.at3(i, j, 0); }
  double col_at(std::size_t i, std::size_t j) const { return coords.at3(i, j, 1); }
};

/// Color jitter knobs. All-zero means the jitter stage is skipped entirely
/// (and consumes no rng draws).
struct AugmentConfig {
  double brightness = 0.0;   // factor drawn from [max(0,1-b), 1+b]
  double contrast = 0.0;
  double saturation = 0.0;
  double grayscale_prob = 0.0;

  bool enabled() const {
    return brightness > 0.0 || contrast > 0.0 || saturation > 0.0 ||
           grayscale_prob > 0.0;
  }
};

/// Samples a random resized crop: area fraction uniform in area_range, aspect
/// ratio log-uniform in aspect_range, position uniform over valid placements.
/// Falls back to a centered maximal crop when no placement fits, so it never
/// fails.
CropRect sample_view_spec(Rng& rng, std::pair<std::size_t, std::size_t> seed_dims,
                          std::pair<double, double> area_range,
                          std::pair<double, double> aspect_range,
                          std::pair<std::size_t, std::size_t> out_size,
                          double flip_prob);

/// Resamples the crop content to (out_h, out_w) with bilinear interpolation
/// (half-pixel centers), mirrors columns if hflip, then applies color jitter.
Tensor apply_view(const SeedSample& img, const CropRect& crop,
                  const AugmentConfig& jitter, Rng& rng);

/// Nearest-neighbor resample of a crop applied to an integer mask (used by
/// evaluation, not by training).
std::vector<std::uint8_t> apply_view_mask(const std::vector<std::uint8_t>& mask,
                                          std::size_t h, std::size_t w,
                                          const CropRect& crop);

/// Absolute coordinates of the centers of an (H, W) grid of equal rectangles
/// covering the crop; columns are reversed when the view is flipped.
PositionGrid position_grid(const CropRect& crop, std::size_t map_h, std::size_t map_w,
                           int view_id = 0);

}  // namespace vicregl
