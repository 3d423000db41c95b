#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vicregl/geometry.hpp"
#include "vicregl/rng.hpp"

namespace vicregl {

/// Synthetic shapes corpus: textured background (class 0) with 1..k
/// non-overlapping shapes drawn from {disk, rectangle, triangle}
/// (classes 1..3). The label is the kind of the largest shape.
struct ShapesConfig {
  std::size_t canvas = 64;
  std::size_t min_shapes = 1, max_shapes = 3;
  double min_size_frac = 0.10;  // shape half-extent relative to canvas
  double max_size_frac = 0.22;
  double color_jitter = 0.18;   // per-channel palette jitter
  double background_low = 0.10, background_high = 0.55;
  std::size_t background_cells = 4;  // coarse grid of the value noise
  double pixel_noise = 0.02;
  std::uint64_t seed = 0;

  static constexpr std::size_t kNumClasses = 4;  // background + 3 shape kinds

  /// Expected per-class pixel fraction under the config's sampling
  /// distributions (no-overlap placement, shapes fully inside the canvas).
  std::vector<double> expected_class_fractions() const;
};

/// In-memory dataset with the header fields of its source file.
struct Dataset {
  std::vector<SeedSample> samples;
  std::size_t class_count = 0;
  bool has_masks = false;
  bool has_labels = false;

  std::size_t size() const { return samples.size(); }
};

/// One synthetic sample; index seeds an independent stream so any sample is
/// reproducible in isolation.
SeedSample make_shapes_sample(const ShapesConfig& cfg, std::uint64_t index);

/// Writes n samples to a VDSB file. Deterministic: same config + n give
/// byte-identical files.
void gen_shapes(const ShapesConfig& cfg, std::size_t n, const std::string& path);

/// Loads a VDSB file, or (when path is a directory) every *.png inside it
/// sorted by filename.
Dataset load_dataset(const std::string& path);

void save_dataset(const Dataset& ds, const std::string& path);

}  // namespace vicregl
