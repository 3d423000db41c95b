#include "vicregl/matching.hpp"

#include <algorithm>
#include <cmath>

namespace vicregl {

MatchSet location_match(const PositionGrid& grid_a, const PositionGrid& grid_b) {
  const std::size_t ha = grid_a.grid_h(), wa = grid_a.grid_w();
  const std::size_t hb = grid_b.grid_h(), wb = grid_b.grid_w();
  VRL_CHECK_ARG(ha * wa > 0 && hb * wb > 0, "location_match: empty grid");

  MatchSet out;
  out.src_view = grid_a.view_id;
  out.dst_view = grid_b.view_id;
  out.pairs.reserve(ha * wa);
  for (std::size_t i = 0; i < ha; ++i)
    for (std::size_t j = 0; j < wa; ++j) {
      const double ry = grid_a.row_at(i, j), rx = grid_a.col_at(i, j);
      double best = std::numeric_limits<double>::infinity();
      std::size_t bi = 0, bj = 0;
      for (std::size_t p = 0; p < hb; ++p)
        for (std::size_t q = 0; q < wb; ++q) {
          const double dy = grid_b.row_at(p, q) - ry;
          const double dx = grid_b.col_at(p, q) - rx;
          const double d2 = dy * dy + dx * dx;
          if (d2 < best) {
            best = d2;
            bi = p;
            bj = q;
          }
        }
      out.pairs.push_back({i, j, bi, bj, std::sqrt(best)});
    }
  return out;
}

MatchSet feature_match_rows(const double* a, std::size_t ha, std::size_t wa,
                            const double* b, std::size_t hb, std::size_t wb,
                            std::size_t d, bool normalize) {
  VRL_CHECK_ARG(ha * wa > 0 && hb * wb > 0 && d > 0, "feature_match: empty input");
  const std::size_t na = ha * wa, nb = hb * wb;

  std::vector<double> norm_a, norm_b;
  if (normalize) {
    auto normalized = [d](const double* src, std::size_t n) {
      std::vector<double> out(n * d);
      for (std::size_t r = 0; r < n; ++r) {
        double ss = 0.0;
        for (std::size_t k = 0; k < d; ++k) ss += src[r * d + k] * src[r * d + k];
        const double inv = ss > 0.0 ? 1.0 / std::sqrt(ss) : 0.0;
        for (std::size_t k = 0; k < d; ++k) out[r * d + k] = src[r * d + k] * inv;
      }
      return out;
    };
    norm_a = normalized(a, na);
    norm_b = normalized(b, nb);
    a = norm_a.data();
    b = norm_b.data();
  }

  MatchSet out;
  out.pairs.reserve(na);
  for (std::size_t r = 0; r < na; ++r) {
    const double* va = a + r * d;
    double best = std::numeric_limits<double>::infinity();
    std::size_t bidx = 0;
    for (std::size_t s = 0; s < nb; ++s) {
      const double* vb = b + s * d;
      double ss = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = va[k] - vb[k];
        ss += diff * diff;
      }
      if (ss < best) {
        best = ss;
        bidx = s;
      }
    }
    out.pairs.push_back({r / wa, r % wa, bidx / wb, bidx % wb, std::sqrt(best)});
  }
  return out;
}

MatchSet feature_match(const Tensor& map_a, const Tensor& map_b, bool normalize) {
  VRL_CHECK_ARG(map_a.rank() == 3 && map_b.rank() == 3,
                "feature_match: maps must be (D,H,W)");
  VRL_CHECK_ARG(map_a.dim(0) == map_b.dim(0),
                "feature_match: channel dims differ (", map_a.dim(0), " vs ",
                map_b.dim(0), ")");
  const std::size_t d = map_a.dim(0);
  auto to_rows = [d](const Tensor& m) {
    const std::size_t hw = m.dim(1) * m.dim(2);
    std::vector<double> rows(hw * d);
    for (std::size_t c = 0; c < d; ++c)
      for (std::size_t p = 0; p < hw; ++p) rows[p * d + c] = m[c * hw + p];
    return rows;
  };
  const auto ra = to_rows(map_a), rb = to_rows(map_b);
  return feature_match_rows(ra.data(), map_a.dim(1), map_a.dim(2), rb.data(),
                            map_b.dim(1), map_b.dim(2), d, normalize);
}

MatchSet top_gamma(const MatchSet& m, std::size_t gamma) {
  VRL_CHECK_ARG(gamma >= 1, "top_gamma: gamma must be >= 1");
  MatchSet out = m;
  // source indices are unique within a MatchSet, so this order is total
  std::sort(out.pairs.begin(), out.pairs.end(),
            [](const MatchPair& a, const MatchPair& b) {
              if (a.dist != b.dist) return a.dist < b.dist;
              if (a.src_i != b.src_i) return a.src_i < b.src_i;
              return a.src_j < b.src_j;
            });
  if (out.pairs.size() > gamma) out.pairs.resize(gamma);
  return out;
}

}  // namespace vicregl
