#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace pccforge {

using Index = Eigen::Index;

template <typename Scalar>
using Vector3 = Eigen::Matrix<Scalar, 3, 1>;
template <typename Scalar>
using Matrix3 = Eigen::Matrix<Scalar, 3, 3>;
/// N x 3 coordinates, one point per row.
template <typename Scalar>
using PointsT = Eigen::Matrix<Scalar, Eigen::Dynamic, 3, Eigen::RowMajor>;

using Vec3 = Vector3<double>;
using Mat3 = Matrix3<double>;
using Points = PointsT<double>;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

using Rng = std::mt19937_64;

enum class Origin : std::uint8_t { Partial, Coarse };

/// Ordered 3D positions with optional per-point origin tags.
struct PointCloud {
  Points points;
  std::vector<Origin> tags;  // empty, or one tag per point

  PointCloud() = default;
  explicit PointCloud(Points p) : points(std::move(p)) {}

  Index size() const { return points.rows(); }
  bool empty() const { return points.rows() == 0; }
  bool tagged() const { return !tags.empty(); }
  Vec3 point(Index i) const { return points.row(i).transpose(); }
};

// Error hierarchy. Every failure the library reports derives from Error.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct SizeError : Error {
  using Error::Error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct GeometryError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct FormatError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};
struct TrainingError : Error {
  using Error::Error;
};
struct ParseError : Error {
  ParseError(const std::string& what, std::size_t line)
      : Error(what + " (line " + std::to_string(line) + ")"), line_number(line) {}
  std::size_t line_number;
};

/// Matrix of i.i.d. standard normal draws.
inline Matrix standard_normal(Index rows, Index cols, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = normal(rng);
  return m;
}

inline Points standard_normal_points(Index rows, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Points p(rows, 3);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < 3; ++j) p(i, j) = normal(rng);
  return p;
}

}  // namespace pccforge
