#pragma once

#include <functional>
#include <string>
#include <vector>

#include "vicregl/autodiff.hpp"
#include "vicregl/geometry.hpp"
#include "vicregl/matching.hpp"

namespace vicregl {
namespace verify {

/// Builds a scalar loss graph from leaf variables created at the given point.
using ScalarGraphFn = std::function<ad::Var(const std::vector<ad::Var>&)>;

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t worst_input = 0;   // which tensor
  std::size_t worst_coord = 0;   // flat index within it
  double analytic = 0.0, numeric = 0.0;

  bool ok(double tol) const { return max_rel_err < tol; }
};

/// Central finite differences per coordinate against the reverse-mode
/// gradient. Relative error uses max(|analytic|, |numeric|, 1e-8) as the
/// denominator. Throws if the function evaluates non-finite.
GradCheckResult finite_diff_check(const ScalarGraphFn& fn,
                                  const std::vector<Tensor>& point,
                                  double step = 1e-5);

/// Brute-force all-pairs location matching; test-side oracle, shares no code
/// with matching.cpp.
MatchSet exhaustive_location_match(const PositionGrid& grid_a,
                                   const PositionGrid& grid_b);

/// Brute-force all-pairs feature matching over (D,H,W) maps.
MatchSet exhaustive_feature_match(const Tensor& map_a, const Tensor& map_b);

bool match_sets_equal(const MatchSet& a, const MatchSet& b, double dist_tol = 1e-9);

struct StdStats {
  double min_std = 0.0;
  double mean_std = 0.0;
};

/// Per-dimension unbiased standard deviation summary of an (N, D) batch.
StdStats collapse_monitor(const Tensor& batch);

/// A sampled loss evaluation point plus the graph builder that reconstructs
/// the loss from leaves at that point.
struct LossInstance {
  std::vector<Tensor> point;
  ScalarGraphFn graph;
};

LossInstance make_vicreg_instance(Rng& rng, std::size_t n, std::size_t d);

/// Random two-view / multi-crop loss instance, resampled until every
/// feature-matching decision, top-gamma cut, and variance hinge sits safely
/// away from its discontinuity (otherwise central differences would step
/// across it). Leaves are ordered (rows_0, global_0, rows_1, global_1, ...).
LossInstance make_view_instance(Rng& rng, std::size_t batch, std::size_t d,
                                std::size_t dg, std::size_t map_large,
                                std::size_t map_small, std::size_t n_small,
                                double alpha, std::size_t gamma_large,
                                std::size_t gamma_small, bool use_two_view_entry);

/// Named checks runnable from the CLI. Filter is a substring match on the
/// check name ("" runs everything). Prints one line per check; returns true
/// when all selected checks pass.
bool run_suite(const std::string& filter, std::ostream& out);

}  // namespace verify
}  // namespace vicregl
