#include "vicregl/visualize.hpp"

#include <algorithm>
#include <cmath>

#include "vicregl/rng.hpp"

namespace vicregl {

namespace {

struct Rgb {
  std::uint8_t r, g, b;
};

constexpr Rgb kRed{220, 50, 50};
constexpr Rgb kBlue{50, 90, 220};
constexpr Rgb kYellow{240, 220, 40};
constexpr Rgb kGridGray{200, 200, 200};

void put(ImageU8& img, long long x, long long y, Rgb c) {
  if (x < 0 || y < 0 || x >= (long long)img.width || y >= (long long)img.height) return;
  img.at(std::size_t(y), std::size_t(x), 0) = c.r;
  img.at(std::size_t(y), std::size_t(x), 1) = c.g;
  img.at(std::size_t(y), std::size_t(x), 2) = c.b;
}

void draw_line(ImageU8& img, double x0, double y0, double x1, double y1, Rgb c) {
  long long ix0 = llround(x0), iy0 = llround(y0);
  const long long ix1 = llround(x1), iy1 = llround(y1);
  const long long dx = std::abs(ix1 - ix0), dy = -std::abs(iy1 - iy0);
  const long long sx = ix0 < ix1 ? 1 : -1, sy = iy0 < iy1 ? 1 : -1;
  long long err = dx + dy;
  while (true) {
    put(img, ix0, iy0, c);
    if (ix0 == ix1 && iy0 == iy1) break;
    const long long e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      ix0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      iy0 += sy;
    }
  }
}

void draw_rect(ImageU8& img, double x0, double y0, double x1, double y1, Rgb c) {
  draw_line(img, x0, y0, x1, y0, c);
  draw_line(img, x1, y0, x1, y1, c);
  draw_line(img, x1, y1, x0, y1, c);
  draw_line(img, x0, y1, x0, y0, c);
}

ImageU8 upscale(const SeedSample& img, std::size_t scale) {
  const std::size_t h = img.height(), w = img.width();
  ImageU8 out;
  out.width = w * scale;
  out.height = h * scale;
  out.channels = 3;
  out.pixels.resize(out.width * out.height * 3);
  for (std::size_t y = 0; y < out.height; ++y)
    for (std::size_t x = 0; x < out.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = img.pixels.at3(c, y / scale, x / scale);
        out.at(y, x, c) = std::uint8_t(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      }
  return out;
}

void draw_crop(ImageU8& panel, const CropRect& crop, std::size_t scale, Rgb color) {
  draw_rect(panel, crop.x0 * double(scale), crop.y0 * double(scale),
            (crop.x0 + crop.crop_w) * double(scale),
            (crop.y0 + crop.crop_h) * double(scale), color);
}

void draw_cell_grid(ImageU8& panel, const CropRect& crop, std::size_t map_h,
                    std::size_t map_w, std::size_t scale) {
  for (std::size_t j = 1; j < map_w; ++j) {
    const double x = (crop.x0 + double(j) * crop.crop_w / double(map_w)) * double(scale);
    draw_line(panel, x, crop.y0 * double(scale), x,
              (crop.y0 + crop.crop_h) * double(scale), kGridGray);
  }
  for (std::size_t i = 1; i < map_h; ++i) {
    const double y = (crop.y0 + double(i) * crop.crop_h / double(map_h)) * double(scale);
    draw_line(panel, crop.x0 * double(scale), y,
              (crop.x0 + crop.crop_w) * double(scale), y, kGridGray);
  }
}

void draw_matches(ImageU8& panel, const MatchSet& kept, const PositionGrid& ga,
                  const PositionGrid& gb, std::size_t scale, std::size_t max_lines) {
  const std::size_t n = std::min(max_lines, kept.size());
  for (std::size_t k = 0; k < n; ++k) {
    const auto& p = kept.pairs[k];
    draw_line(panel, ga.col_at(p.src_i, p.src_j) * double(scale),
              ga.row_at(p.src_i, p.src_j) * double(scale),
              gb.col_at(p.dst_i, p.dst_j) * double(scale),
              gb.row_at(p.dst_i, p.dst_j) * double(scale), kYellow);
  }
}

}  // namespace

ImageU8 render_matches(const SeedSample& img, const CropRect& crop_a,
                       const CropRect& crop_b, VicreglModel& model,
                       const VisualizeOptions& opts) {
  const std::size_t os = model.encoder_config().output_stride();
  VRL_CHECK_ARG(crop_a.out_h % os == 0 && crop_b.out_h % os == 0,
                "render_matches: view resolution must be divisible by the stride");

  // embed both views (no jitter; rendering must be a pure function)
  Rng null_rng(0);
  auto embed_rows = [&](const CropRect& crop) {
    Tensor view = apply_view(img, crop, {}, null_rng);
    Tensor batch = view.reshaped({1, 3, crop.out_h, crop.out_w});
    ad::Var map = model.encode(ad::constant(batch), false);
    return model.local_project(map, false);
  };
  ad::Var za = embed_rows(crop_a);
  ad::Var zb = embed_rows(crop_b);
  const std::size_t ha = za.value().dim(2), wa = za.value().dim(3);
  const std::size_t hb = zb.value().dim(2), wb = zb.value().dim(3);

  PositionGrid ga = position_grid(crop_a, ha, wa, 0);
  PositionGrid gb = position_grid(crop_b, hb, wb, 1);
  MatchSet loc = top_gamma(location_match(ga, gb), opts.gamma);

  Tensor map_a = za.value().reshaped({za.value().dim(1), ha, wa});
  Tensor map_b = zb.value().reshaped({zb.value().dim(1), hb, wb});
  MatchSet feat =
      top_gamma(feature_match(map_a, map_b, opts.normalize_feature_match), opts.gamma);

  ImageU8 base = upscale(img, opts.scale);
  const std::size_t gap = 8;
  ImageU8 canvas;
  canvas.width = base.width * 3 + gap * 2;
  canvas.height = base.height;
  canvas.channels = 3;
  canvas.pixels.assign(canvas.width * canvas.height * 3, 255);

  auto blit = [&](const ImageU8& panel, std::size_t x_off) {
    for (std::size_t y = 0; y < panel.height; ++y)
      for (std::size_t x = 0; x < panel.width; ++x)
        for (std::size_t c = 0; c < 3; ++c)
          canvas.at(y, x + x_off, c) = panel.at(y, x, c);
  };

  ImageU8 panel = base;
  draw_crop(panel, crop_a, opts.scale, kRed);
  draw_crop(panel, crop_b, opts.scale, kBlue);
  blit(panel, 0);

  ImageU8 loc_panel = base;
  draw_cell_grid(loc_panel, crop_a, ha, wa, opts.scale);
  draw_cell_grid(loc_panel, crop_b, hb, wb, opts.scale);
  draw_crop(loc_panel, crop_a, opts.scale, kRed);
  draw_crop(loc_panel, crop_b, opts.scale, kBlue);
  draw_matches(loc_panel, loc, ga, gb, opts.scale, opts.max_lines);
  blit(loc_panel, base.width + gap);

  ImageU8 feat_panel = base;
  draw_cell_grid(feat_panel, crop_a, ha, wa, opts.scale);
  draw_cell_grid(feat_panel, crop_b, hb, wb, opts.scale);
  draw_crop(feat_panel, crop_a, opts.scale, kRed);
  draw_crop(feat_panel, crop_b, opts.scale, kBlue);
  draw_matches(feat_panel, feat, ga, gb, opts.scale, opts.max_lines);
  blit(feat_panel, 2 * (base.width + gap));

  return canvas;
}

}  // namespace vicregl
