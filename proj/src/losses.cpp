#include "vicregl/losses.hpp"

namespace vicregl {

using ad::Var;

Var invariance_term(const Var& z, const Var& z2) {
  VRL_CHECK_ARG(z.value().same_shape(z2.value()),
                "invariance_term: shape mismatch ", shape_str(z.value().shape()),
                " vs ", shape_str(z2.value().shape()));
  return ad::mean_all(ad::square(ad::sub(z, z2)));
}

Var variance_term(const Var& z, double eps) {
  VRL_CHECK_ARG(z.value().rank() == 2, "variance_term: needs (N,D)");
  const std::size_t n = z.value().dim(0);
  VRL_CHECK_ARG(n >= 2, "variance_term: needs at least 2 rows, got ", n);
  Var centered = ad::sub_rowvec(z, ad::col_mean(z));
  Var var = ad::scale(ad::col_sum(ad::square(centered)), 1.0 / double(n - 1));
  Var std = ad::sqrt(ad::add_scalar(var, eps));
  return ad::mean_all(ad::relu(ad::rsub_scalar(1.0, std)));
}

Var covariance_term(const Var& z) {
  VRL_CHECK_ARG(z.value().rank() == 2, "covariance_term: needs (N,D)");
  const std::size_t n = z.value().dim(0), d = z.value().dim(1);
  VRL_CHECK_ARG(n >= 2, "covariance_term: needs at least 2 rows, got ", n);
  Var centered = ad::sub_rowvec(z, ad::col_mean(z));
  Var cov = ad::scale(ad::matmul(centered, centered, true, false), 1.0 / double(n - 1));
  Tensor off_diag({d, d}, 1.0);
  for (std::size_t i = 0; i < d; ++i) off_diag[i * d + i] = 0.0;
  return ad::scale(ad::sum_all(ad::square(ad::mul_const(cov, std::move(off_diag)))),
                   1.0 / double(d));
}

LossResult vicreg_loss(const Var& z, const Var& z2, const VicregWeights& w) {
  Var inv = invariance_term(z, z2);
  Var var = ad::add(variance_term(z), variance_term(z2));
  Var cov = ad::add(covariance_term(z), covariance_term(z2));
  Var total = ad::add(ad::add(ad::scale(inv, w.lambda_inv), ad::scale(var, w.mu_var)),
                      ad::scale(cov, w.nu_cov));
  LossResult out;
  out.total = total;
  out.breakdown.invariance = inv.item();
  out.breakdown.variance = var.item();
  out.breakdown.covariance = cov.item();
  out.breakdown.global_vicreg = total.item();
  out.breakdown.total = total.item();
  return out;
}

LossResult local_loss(const ViewBatch& src, const ViewBatch& dst,
                      const std::vector<MatchSet>& matches, const VicregWeights& w) {
  VRL_CHECK_ARG(matches.size() == src.batch, "local_loss: one MatchSet per sample");
  std::vector<std::size_t> src_idx, dst_idx;
  const std::size_t hw_src = src.map_h * src.map_w, hw_dst = dst.map_h * dst.map_w;
  for (std::size_t b = 0; b < matches.size(); ++b)
    for (const auto& p : matches[b].pairs) {
      src_idx.push_back(b * hw_src + p.src_i * src.map_w + p.src_j);
      dst_idx.push_back(b * hw_dst + p.dst_i * dst.map_w + p.dst_j);
    }
  VRL_CHECK_ARG(src_idx.size() >= 2, "local_loss: needs at least 2 gathered pairs, got ",
                src_idx.size());
  Var gathered_src = ad::gather_rows(src.rows, std::move(src_idx));
  Var gathered_dst = ad::gather_rows(dst.rows, std::move(dst_idx));
  return vicreg_loss(gathered_src, gathered_dst, w);
}

namespace {

// One direction of the location-based branch: match src cells to dst cells by
// absolute position, keep the best gamma per sample, gather, apply vicreg.
Var location_direction(const ViewBatch& src, const ViewBatch& dst, std::size_t gamma,
                       const VicregWeights& w) {
  std::vector<MatchSet> kept(src.batch);
  for (std::size_t b = 0; b < src.batch; ++b)
    kept[b] = top_gamma(location_match(src.grids[b], dst.grids[b]), gamma);
  return local_loss(src, dst, kept, w).total;
}

Var feature_direction(const ViewBatch& src, const ViewBatch& dst, std::size_t gamma,
                      const VicregWeights& w, bool normalize) {
  const std::size_t d = src.rows.value().dim(1);
  const std::size_t hw_src = src.map_h * src.map_w, hw_dst = dst.map_h * dst.map_w;
  std::vector<MatchSet> kept(src.batch);
  for (std::size_t b = 0; b < src.batch; ++b) {
    const double* a = src.rows.value().data() + b * hw_src * d;
    const double* bb = dst.rows.value().data() + b * hw_dst * d;
    kept[b] = top_gamma(
        feature_match_rows(a, src.map_h, src.map_w, bb, dst.map_h, dst.map_w, d,
                           normalize),
        gamma);
  }
  return local_loss(src, dst, kept, w).total;
}

struct ViewPair {
  const ViewBatch* a;
  const ViewBatch* b;
  std::size_t gamma;
};

LossResult combine_pairs(const std::vector<ViewPair>& pairs, double alpha,
                         const VicregWeights& w, const LocalLossOptions& opts) {
  VRL_CHECK_ARG(alpha >= 0.0 && alpha <= 1.0, "alpha must lie in [0,1], got ", alpha);
  VicregWeights local_w = w;
  if (!opts.local_variance) local_w.mu_var = 0.0;
  if (!opts.local_covariance) local_w.nu_cov = 0.0;

  std::vector<Var> global_terms, inv_terms, var_terms, cov_terms;
  std::vector<Var> loc_terms, feat_terms;
  LossBreakdown bd;
  for (const auto& pr : pairs) {
    LossResult g = vicreg_loss(pr.a->global_embedding, pr.b->global_embedding, w);
    bd.invariance += g.breakdown.invariance;
    bd.variance += g.breakdown.variance;
    bd.covariance += g.breakdown.covariance;
    global_terms.push_back(g.total);
    if (opts.use_location) {
      loc_terms.push_back(location_direction(*pr.a, *pr.b, pr.gamma, local_w));
      loc_terms.push_back(location_direction(*pr.b, *pr.a, pr.gamma, local_w));
    }
    if (opts.use_feature) {
      feat_terms.push_back(feature_direction(*pr.a, *pr.b, pr.gamma, local_w,
                                             opts.normalize_feature_match));
      feat_terms.push_back(feature_direction(*pr.b, *pr.a, pr.gamma, local_w,
                                             opts.normalize_feature_match));
    }
  }
  Var global_sum = ad::add_n(global_terms);
  Var local_sum = ad::constant(Tensor::scalar(0.0));
  Var loc_sum, feat_sum;
  if (opts.use_location) {
    loc_sum = ad::add_n(loc_terms);
    bd.local_location = loc_sum.item();
    local_sum = ad::add(local_sum, loc_sum);
  }
  if (opts.use_feature) {
    feat_sum = ad::add_n(feat_terms);
    bd.local_feature = feat_sum.item();
    local_sum = ad::add(local_sum, feat_sum);
  }
  Var total = ad::add(ad::scale(global_sum, alpha), ad::scale(local_sum, 1.0 - alpha));
  bd.global_vicreg = global_sum.item();
  bd.total = total.item();
  return {total, bd};
}

}  // namespace

LossResult total_loss_two_view(const ViewBatch& a, const ViewBatch& b, double alpha,
                               std::size_t gamma, const VicregWeights& w,
                               const LocalLossOptions& opts) {
  return combine_pairs({{&a, &b, gamma}}, alpha, w, opts);
}

LossResult total_loss_multicrop(const std::vector<ViewBatch>& views, double alpha,
                                std::size_t gamma_large, std::size_t gamma_small,
                                const VicregWeights& w, const LocalLossOptions& opts) {
  std::vector<std::size_t> large, small;
  for (std::size_t i = 0; i < views.size(); ++i)
    (views[i].is_large ? large : small).push_back(i);
  VRL_CHECK_ARG(large.size() == 2, "total_loss_multicrop: needs exactly 2 large views, got ",
                large.size());

  std::vector<ViewPair> pairs;
  pairs.push_back({&views[large[0]], &views[large[1]], gamma_large});
  for (std::size_t m : large)
    for (std::size_t n : small) pairs.push_back({&views[m], &views[n], gamma_small});
  return combine_pairs(pairs, alpha, w, opts);
}

}  // namespace vicregl
