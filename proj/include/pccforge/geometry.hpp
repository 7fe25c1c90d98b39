#pragma once

#include <cmath>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "pccforge/types.hpp"

namespace pccforge {

/// k nearest neighbours of a center point, expressed relative to the patch centroid.
struct Patch {
  Index center_index = 0;
  std::vector<Index> neighbor_indices;  // ascending distance from the center
  Points local_coords;                  // centroid-subtracted, same order as neighbor_indices
  Vec3 centroid = Vec3::Zero();
  Vec3 normal = Vec3::UnitZ();
};

/// Per-patch transform: normal alignment, in-plane rotation and symmetry plane angle.
struct RigidFrame {
  Mat3 r1 = Mat3::Identity();
  Mat3 r2 = Mat3::Identity();
  double psi = 0.0;
};

// Rotations and reflections. Header-only, templated on the scalar type.

template <typename Scalar>
Matrix3<Scalar> skew(const Vector3<Scalar>& k) {
  Matrix3<Scalar> m;
  m << Scalar(0), -k.z(), k.y(),  //
      k.z(), Scalar(0), -k.x(),   //
      -k.y(), k.x(), Scalar(0);
  return m;
}

/// Rodrigues matrix for a unit axis and an angle.
template <typename Scalar>
Matrix3<Scalar> axis_angle_matrix(const Vector3<Scalar>& axis, Scalar angle) {
  using std::cos;
  using std::sin;
  const Scalar c = cos(angle);
  return c * Matrix3<Scalar>::Identity() + (Scalar(1) - c) * axis * axis.transpose() +
         sin(angle) * skew(axis);
}

/// Rotation R with R * n = e_z.
///
/// The axis is n x e_z normalised; the angle is the angle between n and e_z. When n is
/// within 1e-8 (cross-product norm) of a pole the axis is undefined: +e_z maps to the
/// identity and -e_z to a half turn about e_x.
template <typename Scalar>
Matrix3<Scalar> rotation_to_z(const Vector3<Scalar>& n) {
  using std::atan2;
  const Vector3<Scalar> ez = Vector3<Scalar>::UnitZ();
  const Vector3<Scalar> cross = n.cross(ez);
  const Scalar sin_theta = cross.norm();
  const Scalar cos_theta = n.dot(ez);
  if (sin_theta < Scalar(1e-8)) {
    if (cos_theta > Scalar(0)) return Matrix3<Scalar>::Identity();
    return Vector3<Scalar>(Scalar(1), Scalar(-1), Scalar(-1)).asDiagonal();
  }
  // atan2 equals arccos(n . e_z) for unit n and keeps full precision near the poles.
  const Scalar theta = atan2(sin_theta, cos_theta);
  return axis_angle_matrix<Scalar>(cross / sin_theta, theta);
}

/// Rotation about e_z given the angle's cosine and sine.
template <typename Scalar>
Matrix3<Scalar> rotation_about_z(Scalar cos_phi, Scalar sin_phi) {
  Matrix3<Scalar> r;
  r << cos_phi, -sin_phi, Scalar(0),  //
      sin_phi, cos_phi, Scalar(0),    //
      Scalar(0), Scalar(0), Scalar(1);
  return r;
}

template <typename Scalar>
Matrix3<Scalar> rotation_about_z(Scalar phi) {
  using std::cos;
  using std::sin;
  return rotation_about_z<Scalar>(cos(phi), sin(phi));
}

/// Householder matrix I - 2 n n^T for the plane through the origin with normal
/// (cos psi, sin psi, 0). The plane always contains e_z.
template <typename Scalar>
Matrix3<Scalar> reflection_matrix(Scalar cos_psi, Scalar sin_psi) {
  const Vector3<Scalar> n(cos_psi, sin_psi, Scalar(0));
  return Matrix3<Scalar>::Identity() - Scalar(2) * n * n.transpose() / n.squaredNorm();
}

template <typename Scalar>
Matrix3<Scalar> reflection_matrix(Scalar psi) {
  using std::cos;
  using std::sin;
  return reflection_matrix<Scalar>(cos(psi), sin(psi));
}

/// Reflects every row of `points` across the plane selected by `psi`.
template <typename Scalar>
PointsT<Scalar> reflect_about_plane(const PointsT<Scalar>& points, Scalar psi) {
  using std::cos;
  using std::sin;
  const Vector3<Scalar> n(cos(psi), sin(psi), Scalar(0));
  PointsT<Scalar> out(points.rows(), 3);
  for (Index i = 0; i < points.rows(); ++i) {
    const Vector3<Scalar> p = points.row(i).transpose();
    out.row(i) = (p - Scalar(2) * n.dot(p) * n).transpose();
  }
  return out;
}

/// Applies r2 * r1 to a vector (the rotation part of canonicalisation).
inline Vec3 forward_rotate(const Vec3& v, const RigidFrame& frame) { return frame.r2 * (frame.r1 * v); }

/// Inverse of forward_rotate: r1^T * r2^T * offset.
inline Vec3 invert_frame(const Vec3& offset, const RigidFrame& frame) {
  return frame.r1.transpose() * (frame.r2.transpose() * offset);
}

// Sampling and neighbourhoods.

/// Farthest point sampling. Ties go to the lowest index.
std::vector<Index> farthest_point_sample(const Points& cloud, Index n, Index start = 0);

/// k nearest neighbours of `query`, ascending distance, ties by lowest index.
std::vector<Index> knn(const Points& cloud, const Vec3& query, Index k);

/// knn for every row of `queries` against `cloud`; row-major result (queries x k).
std::vector<Index> knn_batch(const Points& cloud, const Points& queries, Index k);

/// PCA normal of centred coordinates; sign chosen so the largest component is positive.
Vec3 estimate_normal(const Points& local_coords);

Patch extract_patch(const Points& cloud, Index center, Index k);

/// Patch from precomputed neighbour indices (neighbors[0] should be the center).
Patch make_patch(const Points& cloud, Index center, std::span<const Index> neighbors);

Mat3 covariance(const Points& coords);

bool is_rotation(const Mat3& r, double tol = 1e-6);

}  // namespace pccforge
