#include "vicregl/verify.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>

#include "vicregl/losses.hpp"
#include "vicregl/rng.hpp"

namespace vicregl {
namespace verify {

GradCheckResult finite_diff_check(const ScalarGraphFn& fn,
                                  const std::vector<Tensor>& point, double step) {
  std::vector<ad::Var> leaves;
  leaves.reserve(point.size());
  for (const auto& t : point) leaves.push_back(ad::leaf(t));
  ad::Var root = fn(leaves);
  VRL_CHECK(std::isfinite(root.item()), "finite_diff_check: non-finite value ",
            root.item(), " at the evaluation point");
  ad::backward(root);

  auto eval_at = [&](const std::vector<Tensor>& p) {
    std::vector<ad::Var> ls;
    ls.reserve(p.size());
    for (const auto& t : p) ls.push_back(ad::leaf(t));
    const double v = fn(ls).item();
    VRL_CHECK(std::isfinite(v), "finite_diff_check: non-finite perturbed value");
    return v;
  };

  GradCheckResult res;
  std::vector<Tensor> probe = point;
  const Tensor empty;
  for (std::size_t t = 0; t < point.size(); ++t) {
    // a leaf the graph never touches has a zero gradient (and no grad buffer)
    const bool reached = leaves[t].grad().numel() == point[t].numel();
    const Tensor& analytic = reached ? leaves[t].grad() : empty;
    for (std::size_t i = 0; i < point[t].numel(); ++i) {
      const double orig = probe[t][i];
      probe[t][i] = orig + step;
      const double fp = eval_at(probe);
      probe[t][i] = orig - step;
      const double fm = eval_at(probe);
      probe[t][i] = orig;
      const double numeric = (fp - fm) / (2.0 * step);
      const double a = reached ? analytic[i] : 0.0;
      const double rel = std::abs(a - numeric) /
                         std::max({std::abs(a), std::abs(numeric), 1e-8});
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_input = t;
        res.worst_coord = i;
        res.analytic = a;
        res.numeric = numeric;
      }
    }
  }
  return res;
}

MatchSet exhaustive_location_match(const PositionGrid& grid_a,
                                   const PositionGrid& grid_b) {
  const std::size_t ha = grid_a.grid_h(), wa = grid_a.grid_w();
  const std::size_t hb = grid_b.grid_h(), wb = grid_b.grid_w();
  // full distance table, then an argmin scan per source cell
  std::vector<double> table(ha * wa * hb * wb);
  for (std::size_t i = 0; i < ha; ++i)
    for (std::size_t j = 0; j < wa; ++j)
      for (std::size_t p = 0; p < hb; ++p)
        for (std::size_t q = 0; q < wb; ++q)
          table[((i * wa + j) * hb + p) * wb + q] =
              std::hypot(grid_a.row_at(i, j) - grid_b.row_at(p, q),
                         grid_a.col_at(i, j) - grid_b.col_at(p, q));
  MatchSet out;
  out.src_view = grid_a.view_id;
  out.dst_view = grid_b.view_id;
  for (std::size_t s = 0; s < ha * wa; ++s) {
    std::size_t arg = 0;
    for (std::size_t t = 1; t < hb * wb; ++t)
      if (table[s * hb * wb + t] < table[s * hb * wb + arg]) arg = t;
    out.pairs.push_back(
        {s / wa, s % wa, arg / wb, arg % wb, table[s * hb * wb + arg]});
  }
  return out;
}

MatchSet exhaustive_feature_match(const Tensor& map_a, const Tensor& map_b) {
  const std::size_t d = map_a.dim(0);
  const std::size_t na = map_a.dim(1) * map_a.dim(2);
  const std::size_t nb = map_b.dim(1) * map_b.dim(2);
  std::vector<double> table(na * nb, 0.0);
  // accumulate channel by channel over the full pair table
  for (std::size_t c = 0; c < d; ++c)
    for (std::size_t s = 0; s < na; ++s)
      for (std::size_t t = 0; t < nb; ++t) {
        const double diff = map_a[c * na + s] - map_b[c * nb + t];
        table[s * nb + t] += diff * diff;
      }
  MatchSet out;
  const std::size_t wa = map_a.dim(2), wb = map_b.dim(2);
  for (std::size_t s = 0; s < na; ++s) {
    std::size_t arg = 0;
    for (std::size_t t = 1; t < nb; ++t)
      if (table[s * nb + t] < table[s * nb + arg]) arg = t;
    out.pairs.push_back(
        {s / wa, s % wa, arg / wb, arg % wb, std::sqrt(table[s * nb + arg])});
  }
  return out;
}

bool match_sets_equal(const MatchSet& a, const MatchSet& b, double dist_tol) {
  if (a.pairs.size() != b.pairs.size()) return false;
  for (std::size_t i = 0; i < a.pairs.size(); ++i) {
    const auto& x = a.pairs[i];
    const auto& y = b.pairs[i];
    if (x.src_i != y.src_i || x.src_j != y.src_j || x.dst_i != y.dst_i ||
        x.dst_j != y.dst_j || std::abs(x.dist - y.dist) > dist_tol)
      return false;
  }
  return true;
}

StdStats collapse_monitor(const Tensor& batch) {
  VRL_CHECK_ARG(batch.rank() == 2 && batch.dim(0) >= 2,
                "collapse_monitor: needs (N>=2, D)");
  const std::size_t n = batch.dim(0), d = batch.dim(1);
  StdStats st;
  st.min_std = std::numeric_limits<double>::infinity();
  double sum = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += batch[i * d + j];
    mu /= double(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double c = batch[i * d + j] - mu;
      var += c * c;
    }
    const double s = std::sqrt(var / double(n - 1));
    st.min_std = std::min(st.min_std, s);
    sum += s;
  }
  st.mean_std = sum / double(d);
  return st;
}

// ------------------------------------------------------------ loss instances

namespace {

Tensor random_tensor(Rng& rng, std::vector<std::size_t> shape, double stddev) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, stddev);
  return t;
}

std::vector<PositionGrid> random_grids(Rng& rng, std::size_t batch, std::size_t h,
                                       std::size_t w) {
  std::vector<PositionGrid> grids;
  for (std::size_t b = 0; b < batch; ++b) {
    CropRect crop;
    crop.crop_w = rng.uniform(30.0, 100.0);
    crop.crop_h = rng.uniform(30.0, 100.0);
    crop.x0 = rng.uniform(0.0, 100.0 - crop.crop_w > 0 ? 100.0 - crop.crop_w : 0.0);
    crop.y0 = rng.uniform(0.0, 100.0 - crop.crop_h > 0 ? 100.0 - crop.crop_h : 0.0);
    crop.hflip = rng.bernoulli(0.5);
    crop.out_h = crop.out_w = 32;
    grids.push_back(position_grid(crop, h, w, int(b)));
  }
  return grids;
}

// A loss instance is rejected when a feature-matching decision or a top-gamma
// cut sits too close to a tie, or a variance hinge sits at its kink; both
// would make central differences step across a discontinuity.
bool feature_margins_ok(const Tensor& rows, std::size_t batch, std::size_t hw_a,
                        const Tensor& rows_b, std::size_t hw_b, std::size_t d,
                        std::size_t gamma, double margin) {
  for (std::size_t b = 0; b < batch; ++b) {
    std::vector<double> best_sq;
    for (std::size_t s = 0; s < hw_a; ++s) {
      double b1 = std::numeric_limits<double>::infinity(), b2 = b1;
      for (std::size_t t = 0; t < hw_b; ++t) {
        double ss = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
          const double diff =
              rows[(b * hw_a + s) * d + k] - rows_b[(b * hw_b + t) * d + k];
          ss += diff * diff;
        }
        if (ss < b1) {
          b2 = b1;
          b1 = ss;
        } else if (ss < b2) {
          b2 = ss;
        }
      }
      if (hw_b > 1 && b2 - b1 < margin) return false;
      best_sq.push_back(b1);
    }
    std::sort(best_sq.begin(), best_sq.end());
    if (gamma < best_sq.size() && best_sq[gamma] - best_sq[gamma - 1] < margin)
      return false;
  }
  return true;
}

// Every per-dim std the variance term will see must sit away from the hinge
// kink at 1, eps included.
bool stds_away_from_kink(const Tensor& m, double margin) {
  const std::size_t n = m.dim(0), d = m.dim(1);
  if (n < 2) return false;
  for (std::size_t j = 0; j < d; ++j) {
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += m[i * d + j];
    mu /= double(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double c = m[i * d + j] - mu;
      var += c * c;
    }
    const double sd = std::sqrt(var / double(n - 1) + 1e-4);
    if (std::abs(sd - 1.0) < margin) return false;
  }
  return true;
}

Tensor gather_rows_plain(const Tensor& rows, const std::vector<std::size_t>& idx) {
  const std::size_t d = rows.dim(1);
  Tensor out({idx.size(), d});
  for (std::size_t r = 0; r < idx.size(); ++r)
    for (std::size_t k = 0; k < d; ++k) out[r * d + k] = rows[idx[r] * d + k];
  return out;
}

// Central differences at step 1e-5 cannot resolve gradients below ~1e-5
// against double round-off; a point with such a coordinate (other than an
// exact zero from an inactive hinge) is an ill-conditioned measurement and
// gets resampled.
bool gradient_measurable(const LossInstance& inst) {
  std::vector<ad::Var> leaves;
  leaves.reserve(inst.point.size());
  for (const auto& t : inst.point) leaves.push_back(ad::leaf(t));
  ad::Var root = inst.graph(leaves);
  ad::backward(root);
  for (const auto& l : leaves) {
    if (l.grad().numel() != l.value().numel()) continue;
    for (std::size_t i = 0; i < l.grad().numel(); ++i) {
      const double g = std::abs(l.grad()[i]);
      if (g > 0.0 && g < 1e-5) return false;
    }
  }
  return true;
}

}  // namespace

LossInstance make_vicreg_instance(Rng& rng, std::size_t n, std::size_t d) {
  LossInstance inst;
  for (int attempt = 0; attempt < 200; ++attempt) {
    inst.point = {random_tensor(rng, {n, d}, 0.5), random_tensor(rng, {n, d}, 0.5)};
    inst.graph = [](const std::vector<ad::Var>& leaves) {
      return vicreg_loss(leaves[0], leaves[1], {}).total;
    };
    if (stds_away_from_kink(inst.point[0], 5e-3) &&
        stds_away_from_kink(inst.point[1], 5e-3) && gradient_measurable(inst))
      break;
  }
  return inst;
}

LossInstance make_view_instance(Rng& rng, std::size_t batch, std::size_t d,
                                std::size_t dg, std::size_t map_large,
                                std::size_t map_small, std::size_t n_small,
                                double alpha, std::size_t gamma_large,
                                std::size_t gamma_small, bool use_two_view_entry) {
  const std::size_t n_views = 2 + n_small;
  struct Geom {
    std::size_t h, w;
    std::vector<PositionGrid> grids;
    bool large;
  };
  auto geoms = std::make_shared<std::vector<Geom>>();
  LossInstance inst;

  // checks one direction: matching-tie margins plus the hinge distance of all
  // four gathered matrices this direction feeds into vicreg
  auto direction_safe = [&](std::size_t a, std::size_t b, std::size_t gamma) {
    const auto& ga = (*geoms)[a];
    const auto& gb = (*geoms)[b];
    const std::size_t hw_a = ga.h * ga.w, hw_b = gb.h * gb.w;
    const Tensor& ra = inst.point[2 * a];
    const Tensor& rb = inst.point[2 * b];
    if (!feature_margins_ok(ra, batch, hw_a, rb, hw_b, d, gamma, 1e-3)) return false;
    std::vector<std::size_t> loc_src, loc_dst, feat_src, feat_dst;
    for (std::size_t s = 0; s < batch; ++s) {
      MatchSet loc = top_gamma(location_match(ga.grids[s], gb.grids[s]), gamma);
      for (const auto& p : loc.pairs) {
        loc_src.push_back(s * hw_a + p.src_i * ga.w + p.src_j);
        loc_dst.push_back(s * hw_b + p.dst_i * gb.w + p.dst_j);
      }
      MatchSet feat = top_gamma(
          feature_match_rows(ra.data() + s * hw_a * d, ga.h, ga.w,
                             rb.data() + s * hw_b * d, gb.h, gb.w, d),
          gamma);
      for (const auto& p : feat.pairs) {
        feat_src.push_back(s * hw_a + p.src_i * ga.w + p.src_j);
        feat_dst.push_back(s * hw_b + p.dst_i * gb.w + p.dst_j);
      }
    }
    return stds_away_from_kink(gather_rows_plain(ra, loc_src), 5e-3) &&
           stds_away_from_kink(gather_rows_plain(rb, loc_dst), 5e-3) &&
           stds_away_from_kink(gather_rows_plain(ra, feat_src), 5e-3) &&
           stds_away_from_kink(gather_rows_plain(rb, feat_dst), 5e-3);
  };

  for (int attempt = 0; attempt < 200; ++attempt) {
    geoms->clear();
    inst.point.clear();
    for (std::size_t v = 0; v < n_views; ++v) {
      const bool large = v < 2;
      const std::size_t m = large ? map_large : map_small;
      geoms->push_back({m, m, random_grids(rng, batch, m, m), large});
      inst.point.push_back(random_tensor(rng, {batch * m * m, d}, 0.5));
      inst.point.push_back(random_tensor(rng, {batch, dg}, 0.5));
    }
    // geometry is frozen into the graph closure; rows and globals are leaves
    auto snapshot = std::make_shared<std::vector<Geom>>(*geoms);
    inst.graph = [snapshot, batch, alpha, gamma_large, gamma_small,
                  use_two_view_entry](const std::vector<ad::Var>& leaves) {
      std::vector<ViewBatch> views;
      for (std::size_t v = 0; v < snapshot->size(); ++v) {
        ViewBatch vb;
        vb.rows = leaves[2 * v];
        vb.global_embedding = leaves[2 * v + 1];
        vb.batch = batch;
        vb.map_h = (*snapshot)[v].h;
        vb.map_w = (*snapshot)[v].w;
        vb.grids = (*snapshot)[v].grids;
        vb.is_large = (*snapshot)[v].large;
        views.push_back(std::move(vb));
      }
      if (use_two_view_entry)
        return total_loss_two_view(views[0], views[1], alpha, gamma_large, {}, {}).total;
      return total_loss_multicrop(views, alpha, gamma_large, gamma_small, {}, {}).total;
    };

    bool ok = true;
    for (std::size_t v = 0; v < n_views && ok; ++v)
      ok = stds_away_from_kink(inst.point[2 * v + 1], 5e-3);
    for (std::size_t a = 0; a < n_views && ok; ++a)
      for (std::size_t b = 0; b < n_views && ok; ++b) {
        if (a == b) continue;
        if (!(*geoms)[a].large && !(*geoms)[b].large) continue;  // pair never formed
        const bool pair_large = (*geoms)[a].large && (*geoms)[b].large;
        ok = direction_safe(a, b, pair_large ? gamma_large : gamma_small);
      }
    if (ok && gradient_measurable(inst)) break;
  }
  return inst;
}

namespace {

struct Check {
  std::string name;
  std::function<bool(std::ostream&)> run;
};

bool report(std::ostream& out, const std::string& name, bool pass,
            const std::string& detail) {
  out << (pass ? "[ ok ] " : "[FAIL] ") << name;
  if (!detail.empty()) out << "  " << detail;
  out << "\n";
  return pass;
}

std::string err_str(double v) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(2) << v;
  return os.str();
}

}  // namespace

bool run_suite(const std::string& filter, std::ostream& out) {
  std::vector<Check> checks;

  checks.push_back({"grad/quadratic", [](std::ostream& o) {
    Rng rng(11);
    Tensor x = random_tensor(rng, {5, 3}, 1.0);
    auto res = finite_diff_check(
        [](const std::vector<ad::Var>& l) { return ad::sum_all(ad::square(l[0])); },
        {x});
    return report(o, "grad/quadratic", res.ok(1e-8),
                  "max_rel_err=" + err_str(res.max_rel_err));
  }});

  checks.push_back({"grad/vicreg", [](std::ostream& o) {
    Rng rng(12);
    double worst = 0.0;
    for (int i = 0; i < 20; ++i) {
      auto inst = make_vicreg_instance(rng, 4, 6);
      worst = std::max(worst,
                       finite_diff_check(inst.graph, inst.point).max_rel_err);
    }
    return report(o, "grad/vicreg", worst < 1e-4, "max_rel_err=" + err_str(worst));
  }});

  checks.push_back({"grad/two_view", [](std::ostream& o) {
    Rng rng(13);
    double worst = 0.0;
    for (int i = 0; i < 5; ++i) {
      auto inst = make_view_instance(rng, 2, 4, 5, 3, 2, 0, 0.75, 4, 2, true);
      worst = std::max(worst,
                       finite_diff_check(inst.graph, inst.point).max_rel_err);
    }
    return report(o, "grad/two_view", worst < 1e-4, "max_rel_err=" + err_str(worst));
  }});

  checks.push_back({"grad/multicrop", [](std::ostream& o) {
    Rng rng(14);
    double worst = 0.0;
    for (int i = 0; i < 5; ++i) {
      auto inst = make_view_instance(rng, 2, 4, 5, 3, 2, 2, 0.75, 4, 2, false);
      worst = std::max(worst,
                       finite_diff_check(inst.graph, inst.point).max_rel_err);
    }
    return report(o, "grad/multicrop", worst < 1e-4, "max_rel_err=" + err_str(worst));
  }});

  checks.push_back({"match/location", [](std::ostream& o) {
    Rng rng(15);
    for (int i = 0; i < 200; ++i) {
      const std::size_t h = 1 + rng.below(6), w = 1 + rng.below(6);
      const std::size_t h2 = 1 + rng.below(6), w2 = 1 + rng.below(6);
      auto ga = random_grids(rng, 1, h, w)[0];
      auto gb = random_grids(rng, 1, h2, w2)[0];
      if (!match_sets_equal(location_match(ga, gb), exhaustive_location_match(ga, gb)))
        return report(o, "match/location", false, "instance " + std::to_string(i));
    }
    return report(o, "match/location", true, "200 instances");
  }});

  checks.push_back({"match/feature", [](std::ostream& o) {
    Rng rng(16);
    for (int i = 0; i < 200; ++i) {
      const std::size_t d = 1 + rng.below(6);
      Tensor a = random_tensor(rng, {d, 1 + rng.below(7), 1 + rng.below(7)}, 1.0);
      Tensor b = random_tensor(rng, {d, 1 + rng.below(7), 1 + rng.below(7)}, 1.0);
      if (!match_sets_equal(feature_match(a, b), exhaustive_feature_match(a, b)))
        return report(o, "match/feature", false, "instance " + std::to_string(i));
    }
    return report(o, "match/feature", true, "200 instances");
  }});

  checks.push_back({"collapse/constant", [](std::ostream& o) {
    Tensor z({8, 4}, 3.25);
    auto st = collapse_monitor(z);
    return report(o, "collapse/constant", st.min_std == 0.0 && st.mean_std == 0.0, "");
  }});

  checks.push_back({"collapse/gaussian", [](std::ostream& o) {
    Rng rng(17);
    auto st = collapse_monitor(random_tensor(rng, {10000, 8}, 1.0));
    const bool pass = st.mean_std > 0.97 && st.mean_std < 1.03;
    return report(o, "collapse/gaussian", pass,
                  "mean_std=" + err_str(st.mean_std));
  }});

  // The checker itself is exercised against a gradient with a planted sign
  // error; it must be flagged, otherwise every other grad check is suspect.
  checks.push_back({"self/detects_bad_gradient", [](std::ostream& o) {
    Rng rng(18);
    Tensor z = random_tensor(rng, {4, 3}, 0.5);
    auto res = finite_diff_check(
        [](const std::vector<ad::Var>& l) {
          ad::Var c = covariance_term(l[0]);
          // value-preserving sign flip of the gradient path
          ad::Var frozen = ad::constant(Tensor::scalar(2.0 * c.item()));
          return ad::add(frozen, ad::scale(c, -1.0));
        },
        {z});
    return report(o, "self/detects_bad_gradient", !res.ok(1e-4),
                  "max_rel_err=" + err_str(res.max_rel_err));
  }});

  bool all = true;
  int ran = 0;
  for (auto& c : checks) {
    if (!filter.empty() && c.name.find(filter) == std::string::npos) continue;
    ++ran;
    all = c.run(out) && all;
  }
  if (ran == 0) {
    out << "no checks match filter '" << filter << "'\n";
    return false;
  }
  return all;
}

}  // namespace verify
}  // namespace vicregl
