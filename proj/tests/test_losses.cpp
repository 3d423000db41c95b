#include <cmath>

#include "doctest.h"
#include "vicregl/losses.hpp"
#include "vicregl/rng.hpp"
#include "vicregl/verify.hpp"

using namespace vicregl;

namespace {

Tensor randt(Rng& rng, std::vector<std::size_t> shape, double sd = 1.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, sd);
  return t;
}

ad::Var C(Tensor t) { return ad::constant(std::move(t)); }

PositionGrid grid_of(double x0, double y0, double w, double h, std::size_t gh,
                     std::size_t gw) {
  CropRect c{x0, y0, w, h, false, 32, 32};
  return position_grid(c, gh, gw);
}

ViewBatch make_view(Rng& rng, std::size_t batch, std::size_t d, std::size_t dg,
                    std::size_t h, std::size_t w, bool large = true) {
  ViewBatch v;
  v.batch = batch;
  v.map_h = h;
  v.map_w = w;
  v.is_large = large;
  v.rows = C(randt(rng, {batch * h * w, d}, 0.5));
  v.global_embedding = C(randt(rng, {batch, dg}, 0.5));
  for (std::size_t b = 0; b < batch; ++b)
    v.grids.push_back(grid_of(rng.uniform(0, 40), rng.uniform(0, 40),
                              rng.uniform(20, 60), rng.uniform(20, 60), h, w));
  return v;
}

}  // namespace

TEST_CASE("invariance term: zero on equal inputs, hand value, loop oracle") {
  Tensor z({1, 2}, std::vector<double>{0.0, 0.0});
  Tensor z2({1, 2}, std::vector<double>{2.0, 0.0});
  CHECK(invariance_term(C(z), C(z)).item() == 0.0);
  CHECK(invariance_term(C(z), C(z2)).item() == doctest::Approx(2.0));

  Rng rng(41);
  Tensor a = randt(rng, {6, 5});
  Tensor b = randt(rng, {6, 5});
  double ref = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) ref += (a[i] - b[i]) * (a[i] - b[i]);
  ref /= double(a.numel());
  CHECK(invariance_term(C(a), C(b)).item() == doctest::Approx(ref).epsilon(1e-12));

  CHECK_THROWS_AS(invariance_term(C(a), C(z)), std::invalid_argument);
}

TEST_CASE("variance term: constant batch gives 0.99, spread batch gives 0") {
  Tensor z({4, 3}, 1.7);  // identical rows
  CHECK(variance_term(C(z)).item() == doctest::Approx(0.99).epsilon(1e-12));

  Tensor z2({2, 1}, std::vector<double>{0.0, 2.0});  // var 2, std > 1
  CHECK(variance_term(C(z2)).item() == 0.0);

  Rng rng(42);
  for (int i = 0; i < 20; ++i) {
    Tensor r = randt(rng, {5, 4}, rng.uniform(0.01, 3.0));
    const double v = variance_term(C(r)).item();
    CHECK(v >= 0.0);
    CHECK(v <= 0.99);
  }
  Tensor one_row({1, 3}, 0.0);
  CHECK_THROWS_AS(variance_term(C(one_row)), std::invalid_argument);
}

TEST_CASE("covariance term: hand example, single dim, orthogonal columns") {
  Tensor z({2, 2}, std::vector<double>{1.0, 1.0, -1.0, -1.0});
  CHECK(covariance_term(C(z)).item() == doctest::Approx(4.0).epsilon(1e-12));

  Rng rng(43);
  Tensor single = randt(rng, {5, 1});
  CHECK(covariance_term(C(single)).item() == 0.0);

  // centered columns with exactly zero dot product
  Tensor orth({4, 2}, std::vector<double>{1, 1, -1, 1, 1, -1, -1, -1});
  CHECK(covariance_term(C(orth)).item() == doctest::Approx(0.0));
}

TEST_CASE("vicreg loss: composed hand value, exact symmetry, zero weights") {
  Tensor z({3, 2}, 0.4);  // identical rows
  LossResult r = vicreg_loss(C(z), C(z), {25.0, 25.0, 1.0});
  CHECK(r.breakdown.total == doctest::Approx(49.5).epsilon(1e-12));
  CHECK(r.breakdown.invariance == 0.0);
  CHECK(r.breakdown.variance == doctest::Approx(1.98).epsilon(1e-12));

  Rng rng(44);
  Tensor a = randt(rng, {5, 4}), b = randt(rng, {5, 4});
  double ab = vicreg_loss(C(a), C(b), {}).breakdown.total;
  double ba = vicreg_loss(C(b), C(a), {}).breakdown.total;
  CHECK(ab == ba);  // bit-exact

  CHECK(vicreg_loss(C(a), C(b), {0.0, 0.0, 0.0}).breakdown.total == 0.0);
}

TEST_CASE("local loss gathers matched pairs and equals an explicit gather oracle") {
  Rng rng(45);
  const std::size_t B = 3, D = 4, H = 2, W = 2;
  ViewBatch va = make_view(rng, B, D, 6, H, W);
  ViewBatch vb = make_view(rng, B, D, 6, H, W);

  std::vector<MatchSet> matches(B);
  for (std::size_t b = 0; b < B; ++b)
    matches[b] = top_gamma(location_match(va.grids[b], vb.grids[b]), 3);

  LossResult got = local_loss(va, vb, matches, {});

  // oracle: build the two gathered matrices by hand and apply vicreg
  std::size_t n_rows = 0;
  for (const auto& m : matches) n_rows += m.size();
  Tensor s({n_rows, D}), t({n_rows, D});
  std::size_t r = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (const auto& p : matches[b].pairs) {
      for (std::size_t k = 0; k < D; ++k) {
        s.at2(r, k) = va.rows.value().at2(b * H * W + p.src_i * W + p.src_j, k);
        t.at2(r, k) = vb.rows.value().at2(b * H * W + p.dst_i * W + p.dst_j, k);
      }
      ++r;
    }
  double ref = vicreg_loss(C(s), C(t), {}).breakdown.total;
  CHECK(got.breakdown.total == doctest::Approx(ref).epsilon(1e-12));
}

TEST_CASE("local loss on identical views with full gamma has zero invariance") {
  Rng rng(46);
  ViewBatch v = make_view(rng, 2, 3, 4, 2, 2);
  ViewBatch v2 = v;  // same rows, same grids
  std::vector<MatchSet> matches(2);
  for (std::size_t b = 0; b < 2; ++b)
    matches[b] = top_gamma(location_match(v.grids[b], v2.grids[b]), 4);
  LossResult r = local_loss(v, v2, matches, {});
  CHECK(r.breakdown.invariance == 0.0);
}

TEST_CASE("local loss refuses fewer than two gathered pairs") {
  Rng rng(47);
  ViewBatch v = make_view(rng, 1, 3, 4, 1, 1);
  std::vector<MatchSet> matches(1);
  matches[0].pairs = {{0, 0, 0, 0, 0.0}};
  CHECK_THROWS_AS(local_loss(v, v, matches, {}), std::invalid_argument);
}

TEST_CASE("alpha=1 total equals the global vicreg term bit-for-bit") {
  Rng rng(48);
  ViewBatch a = make_view(rng, 3, 4, 6, 2, 2);
  ViewBatch b = make_view(rng, 3, 4, 6, 2, 2);
  LossResult r = total_loss_two_view(a, b, 1.0, 3, {});
  double global = vicreg_loss(a.global_embedding, b.global_embedding, {}).breakdown.total;
  CHECK(r.breakdown.total == global);
  CHECK(r.breakdown.global_vicreg == global);
  // locals are still reported
  CHECK(r.breakdown.local_location != 0.0);
  CHECK(r.breakdown.local_feature != 0.0);
}

TEST_CASE("two-view total is symmetric under swapping the views") {
  Rng rng(49);
  ViewBatch a = make_view(rng, 2, 4, 5, 2, 3);
  ViewBatch b = make_view(rng, 2, 4, 5, 3, 2);
  double ab = total_loss_two_view(a, b, 0.6, 3, {}).breakdown.total;
  double ba = total_loss_two_view(b, a, 0.6, 3, {}).breakdown.total;
  CHECK(ab == ba);
}

TEST_CASE("alpha=0.75 two-view total equals the hand-composed parts") {
  Rng rng(50);
  const std::size_t B = 2, D = 3, DG = 4;
  ViewBatch a = make_view(rng, B, D, DG, 1, 2);
  ViewBatch b = make_view(rng, B, D, DG, 1, 2);
  const std::size_t gamma = 2;
  LossResult r = total_loss_two_view(a, b, 0.75, gamma, {});

  auto direction_loc = [&](const ViewBatch& s, const ViewBatch& d) {
    std::vector<MatchSet> ms(B);
    for (std::size_t i = 0; i < B; ++i)
      ms[i] = top_gamma(location_match(s.grids[i], d.grids[i]), gamma);
    return local_loss(s, d, ms, {}).breakdown.total;
  };
  auto direction_feat = [&](const ViewBatch& s, const ViewBatch& d) {
    std::vector<MatchSet> ms(B);
    for (std::size_t i = 0; i < B; ++i) {
      Tensor sm({D, s.map_h, s.map_w}), dm({D, d.map_h, d.map_w});
      for (std::size_t c = 0; c < D; ++c)
        for (std::size_t p = 0; p < s.map_h * s.map_w; ++p)
          sm[c * s.map_h * s.map_w + p] =
              s.rows.value().at2(i * s.map_h * s.map_w + p, c);
      for (std::size_t c = 0; c < D; ++c)
        for (std::size_t p = 0; p < d.map_h * d.map_w; ++p)
          dm[c * d.map_h * d.map_w + p] =
              d.rows.value().at2(i * d.map_h * d.map_w + p, c);
      ms[i] = top_gamma(verify::exhaustive_feature_match(sm, dm), gamma);
    }
    return local_loss(s, d, ms, {}).breakdown.total;
  };

  const double global =
      vicreg_loss(a.global_embedding, b.global_embedding, {}).breakdown.total;
  const double expected =
      0.75 * global + 0.25 * (direction_loc(a, b) + direction_loc(b, a) +
                              direction_feat(a, b) + direction_feat(b, a));
  CHECK(r.breakdown.total == doctest::Approx(expected).epsilon(1e-12));

  // the breakdown must reconstruct the total
  const double recon = 0.75 * r.breakdown.global_vicreg +
                       0.25 * (r.breakdown.local_location + r.breakdown.local_feature);
  CHECK(r.breakdown.total == doctest::Approx(recon).epsilon(1e-10));
}

TEST_CASE("multicrop with two large views reduces to the two-view loss") {
  Rng rng(51);
  for (int trial = 0; trial < 25; ++trial) {
    ViewBatch a = make_view(rng, 2, 3, 4, 2, 2);
    ViewBatch b = make_view(rng, 2, 3, 4, 2, 2);
    double mc = total_loss_multicrop({a, b}, 0.75, 3, 2, {}).breakdown.total;
    double tv = total_loss_two_view(a, b, 0.75, 3, {}).breakdown.total;
    CHECK(std::abs(mc - tv) <= 1e-12 * std::max(1.0, std::abs(tv)));
  }
}

TEST_CASE("multicrop keeps gamma1 pairs for large-large and gamma2 with small maps") {
  Rng rng(52);
  const std::size_t B = 2;
  ViewBatch l1 = make_view(rng, B, 4, 5, 7, 7, true);
  ViewBatch l2 = make_view(rng, B, 4, 5, 7, 7, true);
  ViewBatch s1 = make_view(rng, B, 4, 5, 3, 3, false);

  // counted through the gathered-row population of each direction
  auto count_loc_pairs = [&](const ViewBatch& s, const ViewBatch& d, std::size_t g) {
    std::size_t n = 0;
    for (std::size_t i = 0; i < B; ++i)
      n += top_gamma(location_match(s.grids[i], d.grids[i]), g).size();
    return n;
  };
  CHECK(count_loc_pairs(l1, l2, 20) == B * 20);
  CHECK(count_loc_pairs(l1, s1, 4) == B * 4);
  CHECK(count_loc_pairs(s1, l1, 4) == B * 4);

  // and the full loss runs with those settings
  LossResult r = total_loss_multicrop({l1, l2, s1}, 0.75, 20, 4, {});
  CHECK(std::isfinite(r.breakdown.total));
}

TEST_CASE("permuting small views leaves the multicrop total unchanged") {
  Rng rng(53);
  ViewBatch l1 = make_view(rng, 2, 3, 4, 3, 3, true);
  ViewBatch l2 = make_view(rng, 2, 3, 4, 3, 3, true);
  ViewBatch s1 = make_view(rng, 2, 3, 4, 2, 2, false);
  ViewBatch s2 = make_view(rng, 2, 3, 4, 2, 2, false);
  double t1 = total_loss_multicrop({l1, l2, s1, s2}, 0.7, 4, 2, {}).breakdown.total;
  double t2 = total_loss_multicrop({l1, l2, s2, s1}, 0.7, 4, 2, {}).breakdown.total;
  CHECK(t1 == doctest::Approx(t2).epsilon(1e-12));
}

TEST_CASE("multicrop rejects anything but exactly two large views") {
  Rng rng(54);
  ViewBatch l1 = make_view(rng, 2, 3, 4, 2, 2, true);
  ViewBatch s1 = make_view(rng, 2, 3, 4, 2, 2, false);
  CHECK_THROWS_AS(total_loss_multicrop({l1, s1}, 0.5, 2, 2, {}), std::invalid_argument);
  ViewBatch l2 = make_view(rng, 2, 3, 4, 2, 2, true);
  ViewBatch l3 = make_view(rng, 2, 3, 4, 2, 2, true);
  CHECK_THROWS_AS(total_loss_multicrop({l1, l2, l3}, 0.5, 2, 2, {}),
                  std::invalid_argument);
}

TEST_CASE("disabled local branches are reported as exact zeros") {
  Rng rng(55);
  ViewBatch a = make_view(rng, 2, 3, 4, 2, 2);
  ViewBatch b = make_view(rng, 2, 3, 4, 2, 2);
  LocalLossOptions opts;
  opts.use_location = false;
  LossResult r = total_loss_two_view(a, b, 0.5, 2, {}, opts);
  CHECK(r.breakdown.local_location == 0.0);
  CHECK(r.breakdown.local_feature != 0.0);
  CHECK(r.breakdown.total ==
        doctest::Approx(0.5 * r.breakdown.global_vicreg +
                        0.5 * r.breakdown.local_feature).epsilon(1e-12));

  opts = {};
  opts.use_feature = false;
  LossResult r2 = total_loss_two_view(a, b, 0.5, 2, {}, opts);
  CHECK(r2.breakdown.local_feature == 0.0);
}

TEST_CASE("match selection carries no gradient: frozen-match oracle agreement") {
  Rng rng(56);
  const std::size_t B = 2, D = 3, H = 2, W = 2;
  Tensor rows_a = randt(rng, {B * H * W, D}, 0.5);
  Tensor rows_b = randt(rng, {B * H * W, D}, 0.5);
  Tensor g_a = randt(rng, {B, 4}, 0.5);
  Tensor g_b = randt(rng, {B, 4}, 0.5);
  std::vector<PositionGrid> grids_a, grids_b;
  for (std::size_t i = 0; i < B; ++i) {
    grids_a.push_back(grid_of(rng.uniform(0, 20), rng.uniform(0, 20), 40, 40, H, W));
    grids_b.push_back(grid_of(rng.uniform(0, 20), rng.uniform(0, 20), 40, 40, H, W));
  }

  auto build = [&](const std::vector<ad::Var>& l) {
    ViewBatch a{l[0], B, H, W, grids_a, l[2], true};
    ViewBatch b{l[1], B, H, W, grids_b, l[3], true};
    return total_loss_two_view(a, b, 0.75, 3, {}).total;
  };

  // the same loss with matches frozen at the evaluation point
  ViewBatch a0{ad::constant(rows_a), B, H, W, grids_a, ad::constant(g_a), true};
  ViewBatch b0{ad::constant(rows_b), B, H, W, grids_b, ad::constant(g_b), true};
  std::vector<MatchSet> loc_ab(B), loc_ba(B), feat_ab(B), feat_ba(B);
  for (std::size_t i = 0; i < B; ++i) {
    loc_ab[i] = top_gamma(location_match(grids_a[i], grids_b[i]), 3);
    loc_ba[i] = top_gamma(location_match(grids_b[i], grids_a[i]), 3);
    feat_ab[i] = top_gamma(
        feature_match_rows(rows_a.data() + i * H * W * D, H, W,
                           rows_b.data() + i * H * W * D, H, W, D),
        3);
    feat_ba[i] = top_gamma(
        feature_match_rows(rows_b.data() + i * H * W * D, H, W,
                           rows_a.data() + i * H * W * D, H, W, D),
        3);
  }
  auto build_frozen = [&](const std::vector<ad::Var>& l) {
    ViewBatch a{l[0], B, H, W, grids_a, l[2], true};
    ViewBatch b{l[1], B, H, W, grids_b, l[3], true};
    ad::Var global = vicreg_loss(a.global_embedding, b.global_embedding, {}).total;
    ad::Var locs = ad::add(local_loss(a, b, loc_ab, {}).total,
                           local_loss(b, a, loc_ba, {}).total);
    ad::Var feats = ad::add(local_loss(a, b, feat_ab, {}).total,
                            local_loss(b, a, feat_ba, {}).total);
    return ad::add(ad::scale(global, 0.75), ad::scale(ad::add(locs, feats), 0.25));
  };

  std::vector<ad::Var> live{ad::leaf(rows_a), ad::leaf(rows_b), ad::leaf(g_a),
                            ad::leaf(g_b)};
  std::vector<ad::Var> froz{ad::leaf(rows_a), ad::leaf(rows_b), ad::leaf(g_a),
                            ad::leaf(g_b)};
  ad::Var live_loss = build(live);
  ad::Var froz_loss = build_frozen(froz);
  CHECK(live_loss.item() == doctest::Approx(froz_loss.item()).epsilon(1e-12));
  ad::backward(live_loss);
  ad::backward(froz_loss);
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t i = 0; i < live[t].grad().numel(); ++i)
      CHECK(live[t].grad()[i] == doctest::Approx(froz[t].grad()[i]).epsilon(1e-12));

  // an infinitesimal perturbation leaves the selected index sets unchanged
  Tensor bumped = rows_a;
  bumped[0] += 1e-9;
  for (std::size_t i = 0; i < B; ++i) {
    MatchSet m = top_gamma(
        feature_match_rows(bumped.data() + i * H * W * D, H, W,
                           rows_b.data() + i * H * W * D, H, W, D),
        3);
    for (std::size_t k = 0; k < m.size(); ++k) {
      CHECK(m.pairs[k].src_i == feat_ab[i].pairs[k].src_i);
      CHECK(m.pairs[k].src_j == feat_ab[i].pairs[k].src_j);
      CHECK(m.pairs[k].dst_i == feat_ab[i].pairs[k].dst_i);
      CHECK(m.pairs[k].dst_j == feat_ab[i].pairs[k].dst_j);
    }
  }
}

TEST_CASE("vicreg gradients pass a quick finite-difference check") {
  Rng rng(57);
  Tensor a = randt(rng, {4, 6}, 0.5);
  Tensor b = randt(rng, {4, 6}, 0.5);
  auto res = verify::finite_diff_check(
      [](const std::vector<ad::Var>& l) { return vicreg_loss(l[0], l[1], {}).total; },
      {a, b});
  CHECK(res.max_rel_err < 1e-4);
}
