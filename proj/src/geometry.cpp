#include "pccforge/geometry.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <string>

#include <Eigen/Eigenvalues>

namespace pccforge {

std::vector<Index> farthest_point_sample(const Points& cloud, Index n, Index start) {
  const Index size = cloud.rows();
  if (n < 1 || n > size)
    throw SizeError("farthest_point_sample: n=" + std::to_string(n) + " outside [1, " +
                    std::to_string(size) + "]");
  if (start < 0 || start >= size) throw SizeError("farthest_point_sample: start index out of range");

  std::vector<Index> selected;
  selected.reserve(static_cast<std::size_t>(n));
  Eigen::VectorXd min_dist = Eigen::VectorXd::Constant(size, std::numeric_limits<double>::infinity());
  Index current = start;
  for (Index s = 0; s < n; ++s) {
    selected.push_back(current);
    min_dist(current) = -1.0;  // never chosen again
    if (s + 1 == n) break;
    const Eigen::RowVector3d c = cloud.row(current);
    Index best = -1;
    double best_dist = -1.0;
    for (Index i = 0; i < size; ++i) {
      if (min_dist(i) < 0.0) continue;
      const double d = (cloud.row(i) - c).squaredNorm();
      if (d < min_dist(i)) min_dist(i) = d;
      if (min_dist(i) > best_dist) {
        best_dist = min_dist(i);
        best = i;
      }
    }
    current = best;
  }
  return selected;
}

namespace {

void nearest_into(const Points& cloud, const Eigen::RowVector3d& q, Index k, std::vector<double>& dist,
                  std::vector<Index>& order, Index* out) {
  const Index size = cloud.rows();
  for (Index i = 0; i < size; ++i) dist[static_cast<std::size_t>(i)] = (cloud.row(i) - q).squaredNorm();
  std::iota(order.begin(), order.end(), Index{0});
  auto closer = [&](Index a, Index b) {
    const double da = dist[static_cast<std::size_t>(a)];
    const double db = dist[static_cast<std::size_t>(b)];
    return da < db || (da == db && a < b);
  };
  std::partial_sort(order.begin(), order.begin() + k, order.end(), closer);
  std::copy(order.begin(), order.begin() + k, out);
}

void check_k(Index k, Index size) {
  if (k < 1 || k > size)
    throw SizeError("knn: k=" + std::to_string(k) + " outside [1, " + std::to_string(size) + "]");
}

}  // namespace

std::vector<Index> knn(const Points& cloud, const Vec3& query, Index k) {
  check_k(k, cloud.rows());
  std::vector<double> dist(static_cast<std::size_t>(cloud.rows()));
  std::vector<Index> order(static_cast<std::size_t>(cloud.rows()));
  std::vector<Index> out(static_cast<std::size_t>(k));
  nearest_into(cloud, query.transpose(), k, dist, order, out.data());
  return out;
}

std::vector<Index> knn_batch(const Points& cloud, const Points& queries, Index k) {
  check_k(k, cloud.rows());
  std::vector<double> dist(static_cast<std::size_t>(cloud.rows()));
  std::vector<Index> order(static_cast<std::size_t>(cloud.rows()));
  std::vector<Index> out(static_cast<std::size_t>(queries.rows() * k));
  for (Index q = 0; q < queries.rows(); ++q)
    nearest_into(cloud, queries.row(q), k, dist, order, out.data() + q * k);
  return out;
}

Mat3 covariance(const Points& coords) {
  const Index k = coords.rows();
  const Eigen::RowVector3d mean = coords.colwise().mean();
  const Points centred = coords.rowwise() - mean;
  return (centred.transpose() * centred) / static_cast<double>(std::max<Index>(k - 1, 1));
}

namespace {

Vec3 orient(Vec3 n) {
  Index axis = 0;
  for (Index i = 1; i < 3; ++i)
    if (std::abs(n(i)) > std::abs(n(axis))) axis = i;
  if (n(axis) < 0.0) n = -n;
  return n;
}

}  // namespace

Vec3 estimate_normal(const Points& local_coords) {
  if (local_coords.rows() < 3) throw GeometryError("patch too small for normal (need at least 3 points)");
  const Mat3 cov = covariance(local_coords);
  const double scale = cov.trace();
  if (!(scale > 1e-24)) throw GeometryError("cannot estimate normal: all patch points coincide");

  Eigen::SelfAdjointEigenSolver<Mat3> solver;
  solver.computeDirect(cov);
  const Vec3 lambda = solver.eigenvalues();  // ascending
  const Mat3 vectors = solver.eigenvectors();
  const double tol = 1e-12 * std::max(1.0, lambda(2));

  if (lambda(1) - lambda(0) > tol) return orient(vectors.col(0).normalized());

  // Smallest eigenvalue is repeated: take the first basis axis with a usable projection
  // onto the degenerate eigenspace.
  const bool isotropic = lambda(2) - lambda(0) <= tol;
  const Vec3 largest = vectors.col(2).normalized();
  for (Index axis = 0; axis < 3; ++axis) {
    const Vec3 basis = Vec3::Unit(axis);
    if (isotropic) return basis;
    const Vec3 projected = basis - basis.dot(largest) * largest;
    if (projected.norm() > 1e-6) return orient(projected.normalized());
  }
  return Vec3::UnitX();
}

Patch make_patch(const Points& cloud, Index center, std::span<const Index> neighbors) {
  const Index k = static_cast<Index>(neighbors.size());
  if (k < 3) throw GeometryError("patch too small for normal (need at least 3 points)");
  Patch patch;
  patch.center_index = center;
  patch.neighbor_indices.assign(neighbors.begin(), neighbors.end());
  patch.local_coords.resize(k, 3);
  for (Index i = 0; i < k; ++i) patch.local_coords.row(i) = cloud.row(neighbors[static_cast<std::size_t>(i)]);
  patch.centroid = patch.local_coords.colwise().mean().transpose();
  patch.local_coords.rowwise() -= patch.centroid.transpose();
  patch.normal = estimate_normal(patch.local_coords);
  return patch;
}

Patch extract_patch(const Points& cloud, Index center, Index k) {
  if (center < 0 || center >= cloud.rows()) throw SizeError("extract_patch: center index out of range");
  if (k < 3) throw GeometryError("patch too small for normal (need at least 3 points)");
  const auto neighbors = knn(cloud, cloud.row(center).transpose(), k);
  return make_patch(cloud, center, neighbors);
}

bool is_rotation(const Mat3& r, double tol) {
  const double ortho = (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff();
  return ortho < tol && std::abs(r.determinant() - 1.0) <= tol;
}

}  // namespace pccforge
