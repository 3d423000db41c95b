#pragma once

#include "vicregl/image_io.hpp"
#include "vicregl/losses.hpp"
#include "vicregl/model.hpp"

namespace vicregl {

struct VisualizeOptions {
  std::size_t gamma = 6;
  std::size_t max_lines = 10;  // matches drawn per panel
  std::size_t scale = 4;       // canvas upscaling
  bool normalize_feature_match = false;
};

/// Three panels over the seed image: crop rectangles, the top location-based
/// matches, and the top feature-based matches (lines join matched cell
/// centers in seed coordinates).
ImageU8 render_matches(const SeedSample& img, const CropRect& crop_a,
                       const CropRect& crop_b, VicreglModel& model,
                       const VisualizeOptions& opts);

}  // namespace vicregl
