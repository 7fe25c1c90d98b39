#pragma once

#include <vector>

#include "pccforge/types.hpp"

namespace pccforge {

struct MetricReport {
  double cd_l2 = 0.0;
  double fscore = 0.0;
  double emd = 0.0;
  double uhd = 0.0;
};

/// For every row of `from`, the squared distance to and index of its nearest row in `to`.
struct NearestResult {
  Eigen::VectorXd squared;
  std::vector<Index> index;
};
NearestResult nearest_neighbors(const Points& from, const Points& to);

/// Symmetric mean-of-means L2 Chamfer distance:
/// 0.5 * (mean_a min_b |a-b|^2 + mean_b min_a |a-b|^2).
double chamfer_l2(const Points& a, const Points& b);

/// Chamfer distance and its gradient with respect to the rows of `a`.
double chamfer_l2_with_grad(const Points& a, const Points& b, Points& grad_a);

/// F-score with a squared-distance threshold `tau`.
double fscore(const Points& a, const Points& b, double tau = 1e-3);

/// Mean distance from each partial point to its nearest completed point.
double uhd(const Points& partial, const Points& completed);

/// Optimal one-to-one assignment minimising total cost (rows -> columns).
/// Returns the column assigned to every row.
std::vector<Index> hungarian_assignment(const Matrix& cost);

/// Mean matched Euclidean distance under the optimal assignment.
double emd_exact(const Points& a, const Points& b);

/// Entropic optimal transport estimate of the same quantity.
double emd_sinkhorn(const Points& a, const Points& b, double epsilon = 0.01, int iterations = 500);

inline constexpr Index kEmdExactLimit = 256;

/// Exact below kEmdExactLimit points, Sinkhorn (epsilon 0.01, 500 iterations) above.
double emd(const Points& a, const Points& b);

/// CD, F-score, EMD against ground truth plus UHD against the partial input.
MetricReport evaluate_completion(const Points& completed, const Points& truth, const Points& partial,
                                 double tau = 1e-3);

}  // namespace pccforge
