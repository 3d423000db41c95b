#pragma once

#include <cstddef>
#include <vector>

#include "vicregl/geometry.hpp"
#include "vicregl/tensor.hpp"

namespace vicregl {

/// One matched pair of feature-map cells: source cell, target cell, and the
/// exact metric value that selected the target.
struct MatchPair {
  std::size_t src_i = 0, src_j = 0;
  std::size_t dst_i = 0, dst_j = 0;
  double dist = 0.0;
};

struct MatchSet {
  std::vector<MatchPair> pairs;  // at most one entry per source cell
  int src_view = 0, dst_view = 0;

  std::size_t size() const { return pairs.size(); }
};

/// For every cell of grid_a, the grid_b cell with the closest absolute
/// seed-image coordinates (Euclidean distance, ties to the lowest row-major
/// target index). Output is ordered row-major by source cell.
MatchSet location_match(const PositionGrid& grid_a, const PositionGrid& grid_b);

/// For every cell of map_a (D,H,W), the map_b cell whose feature vector is
/// closest in l2 distance. Spatial dims may differ; channel dim must match.
/// With normalize=true the search runs on l2-normalized vectors (the stored
/// distance is then the normalized-space distance).
MatchSet feature_match(const Tensor& map_a, const Tensor& map_b,
                       bool normalize = false);

/// Row-matrix variant: a is (ha*wa, d), b is (hb*wb, d), cells row-major.
MatchSet feature_match_rows(const double* a, std::size_t ha, std::size_t wa,
                            const double* b, std::size_t hb, std::size_t wb,
                            std::size_t d, bool normalize = false);

/// Keeps the min(gamma, |m|) smallest-distance pairs, ordered by ascending
/// distance with ties broken by row-major source index.
MatchSet top_gamma(const MatchSet& m, std::size_t gamma);

}  // namespace vicregl
