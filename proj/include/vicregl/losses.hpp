#pragma once

#include <vector>

#include "vicregl/autodiff.hpp"
#include "vicregl/geometry.hpp"
#include "vicregl/matching.hpp"

namespace vicregl {

/// Coefficients of the invariance / variance / covariance terms.
struct VicregWeights {
  double lambda_inv = 25.0;
  double mu_var = 25.0;
  double nu_cov = 1.0;
};

/// Switches for the local criterion: which loss branches run and which
/// regularizers the local vicreg applies. Disabled branches contribute an
/// exact zero to the total and are reported as zero.
struct LocalLossOptions {
  bool use_location = true;    // location-based branch
  bool use_feature = true;     // feature-based branch
  bool local_variance = true;  // V in the local criterion
  bool local_covariance = true;
  bool normalize_feature_match = false;  // l2-normalize vectors for the NN search
};

/// Per-term scalar record of one loss evaluation.
struct LossBreakdown {
  double invariance = 0.0;   // global s(z, z')
  double variance = 0.0;     // global v(z) + v(z')
  double covariance = 0.0;   // global c(z) + c(z')
  double global_vicreg = 0.0;
  double local_location = 0.0;
  double local_feature = 0.0;
  double total = 0.0;
};

/// Differentiable loss value plus its scalar breakdown.
struct LossResult {
  ad::Var total;
  LossBreakdown breakdown;
};

// ---- VICReg terms over an (N, D) embedding batch ----

/// Mean squared difference over all N*D elements.
ad::Var invariance_term(const ad::Var& z, const ad::Var& z2);

/// Mean over dimensions of max(0, 1 - sqrt(var_d + eps)), with the unbiased
/// column variance. Needs at least 2 rows.
ad::Var variance_term(const ad::Var& z, double eps = 1e-4);

/// Sum of squared off-diagonal entries of the empirical covariance matrix,
/// divided by the dimension. Needs at least 2 rows.
ad::Var covariance_term(const ad::Var& z);

/// lambda*s(z,z') + mu*[v(z)+v(z')] + nu*[c(z)+c(z')]
LossResult vicreg_loss(const ad::Var& z, const ad::Var& z2, const VicregWeights& w);

// ---- local losses over matched feature-map cells ----

/// Per-view bundle the loss layer consumes. `rows` holds the projected
/// per-position embeddings of the whole minibatch, laid out row-major as
/// (sample, cell) -> row index sample*H*W + i*W + j.
struct ViewBatch {
  ad::Var rows;  // (B*H*W, D)
  std::size_t batch = 0, map_h = 0, map_w = 0;
  std::vector<PositionGrid> grids;  // size B
  ad::Var global_embedding;         // (B, Dg)
  bool is_large = true;
};

/// Gathers matched source/target vectors across the minibatch (B*gamma rows
/// per side) and applies the VICReg criterion to the two stacks. `matches`
/// holds one already-filtered MatchSet per sample.
LossResult local_loss(const ViewBatch& src, const ViewBatch& dst,
                      const std::vector<MatchSet>& matches, const VicregWeights& w);

/// alpha * l(g_a, g_b) + (1-alpha) * [Ls(a,b) + Ls(b,a) + Ld(a,b) + Ld(b,a)]
LossResult total_loss_two_view(const ViewBatch& a, const ViewBatch& b, double alpha,
                               std::size_t gamma, const VicregWeights& w,
                               const LocalLossOptions& opts = {});

/// Multi-crop combination: every unordered pair of one large view with any
/// other view contributes its symmetrized local losses (gamma_large when both
/// views are large, gamma_small otherwise) and one global VICReg term.
LossResult total_loss_multicrop(const std::vector<ViewBatch>& views, double alpha,
                                std::size_t gamma_large, std::size_t gamma_small,
                                const VicregWeights& w,
                                const LocalLossOptions& opts = {});

}  // namespace vicregl
