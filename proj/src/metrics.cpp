#include "pccforge/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace pccforge {

namespace {

void require_nonempty(const Points& a, const Points& b, const char* what) {
  if (a.rows() == 0 || b.rows() == 0) throw SizeError(std::string(what) + ": empty point cloud");
}

Matrix distance_matrix(const Points& a, const Points& b) {
  Matrix d(a.rows(), b.rows());
  for (Index j = 0; j < b.rows(); ++j)
    for (Index i = 0; i < a.rows(); ++i) d(i, j) = (a.row(i) - b.row(j)).norm();
  return d;
}

}  // namespace

NearestResult nearest_neighbors(const Points& from, const Points& to) {
  NearestResult out;
  out.squared.resize(from.rows());
  out.index.resize(static_cast<std::size_t>(from.rows()));
  const Index m = to.rows();
  for (Index i = 0; i < from.rows(); ++i) {
    const double x = from(i, 0), y = from(i, 1), z = from(i, 2);
    double best = std::numeric_limits<double>::infinity();
    Index arg = 0;
    for (Index j = 0; j < m; ++j) {
      const double dx = to(j, 0) - x, dy = to(j, 1) - y, dz = to(j, 2) - z;
      const double d = dx * dx + dy * dy + dz * dz;
      if (d < best) {
        best = d;
        arg = j;
      }
    }
    out.squared(i) = best;
    out.index[static_cast<std::size_t>(i)] = arg;
  }
  return out;
}

double chamfer_l2(const Points& a, const Points& b) {
  require_nonempty(a, b, "chamfer_l2");
  return 0.5 * (nearest_neighbors(a, b).squared.mean() + nearest_neighbors(b, a).squared.mean());
}

double chamfer_l2_with_grad(const Points& a, const Points& b, Points& grad_a) {
  require_nonempty(a, b, "chamfer_l2");
  const NearestResult ab = nearest_neighbors(a, b);
  const NearestResult ba = nearest_neighbors(b, a);
  const double na = static_cast<double>(a.rows());
  const double nb = static_cast<double>(b.rows());
  grad_a = Points::Zero(a.rows(), 3);
  for (Index i = 0; i < a.rows(); ++i)
    grad_a.row(i) += (a.row(i) - b.row(ab.index[static_cast<std::size_t>(i)])) / na;
  for (Index j = 0; j < b.rows(); ++j) {
    const Index i = ba.index[static_cast<std::size_t>(j)];
    grad_a.row(i) += (a.row(i) - b.row(j)) / nb;
  }
  return 0.5 * (ab.squared.mean() + ba.squared.mean());
}

double fscore(const Points& a, const Points& b, double tau) {
  require_nonempty(a, b, "fscore");
  if (!(tau > 0.0)) throw ConfigError("fscore: tau must be positive");
  const auto ab = nearest_neighbors(a, b).squared;
  const auto ba = nearest_neighbors(b, a).squared;
  const double precision = static_cast<double>((ab.array() <= tau).count()) / static_cast<double>(a.rows());
  const double recall = static_cast<double>((ba.array() <= tau).count()) / static_cast<double>(b.rows());
  if (precision + recall <= 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

double uhd(const Points& partial, const Points& completed) {
  require_nonempty(partial, completed, "uhd");
  return nearest_neighbors(partial, completed).squared.array().sqrt().mean();
}

std::vector<Index> hungarian_assignment(const Matrix& cost) {
  const Index n = cost.rows();
  if (cost.cols() != n) throw ShapeError("hungarian_assignment: cost matrix must be square");
  const double inf = std::numeric_limits<double>::infinity();
  // 1-based potentials; p[j] is the row matched to column j.
  std::vector<double> u(static_cast<std::size_t>(n + 1), 0.0), v(static_cast<std::size_t>(n + 1), 0.0);
  std::vector<Index> p(static_cast<std::size_t>(n + 1), 0), way(static_cast<std::size_t>(n + 1), 0);
  for (Index i = 1; i <= n; ++i) {
    p[0] = i;
    Index j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(n + 1), inf);
    std::vector<char> used(static_cast<std::size_t>(n + 1), 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const Index i0 = p[static_cast<std::size_t>(j0)];
      double delta = inf;
      Index j1 = 0;
      for (Index j = 1; j <= n; ++j) {
        const auto uj = static_cast<std::size_t>(j);
        if (used[uj]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] - v[uj];
        if (cur < minv[uj]) {
          minv[uj] = cur;
          way[uj] = j0;
        }
        if (minv[uj] < delta) {
          delta = minv[uj];
          j1 = j;
        }
      }
      for (Index j = 0; j <= n; ++j) {
        const auto uj = static_cast<std::size_t>(j);
        if (used[uj]) {
          u[static_cast<std::size_t>(p[uj])] += delta;
          v[uj] -= delta;
        } else {
          minv[uj] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const Index j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<Index> assignment(static_cast<std::size_t>(n), 0);
  for (Index j = 1; j <= n; ++j) assignment[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
  return assignment;
}

double emd_exact(const Points& a, const Points& b) {
  require_nonempty(a, b, "emd");
  if (a.rows() != b.rows()) throw SizeError("emd: clouds must have equal cardinality");
  const Matrix cost = distance_matrix(a, b);
  const auto match = hungarian_assignment(cost);
  double total = 0.0;
  for (Index i = 0; i < a.rows(); ++i) total += cost(i, match[static_cast<std::size_t>(i)]);
  return total / static_cast<double>(a.rows());
}

double emd_sinkhorn(const Points& a, const Points& b, double epsilon, int iterations) {
  require_nonempty(a, b, "emd");
  if (a.rows() != b.rows()) throw SizeError("emd: clouds must have equal cardinality");
  const Index n = a.rows();
  const Matrix cost = distance_matrix(a, b);
  const double mass = 1.0 / static_cast<double>(n);

  if (cost.maxCoeff() / epsilon < 600.0) {
    const Matrix kernel = (-cost / epsilon).array().exp();
    Eigen::VectorXd u = Eigen::VectorXd::Ones(n), v = Eigen::VectorXd::Ones(n);
    for (int it = 0; it < iterations; ++it) {
      u = mass * (kernel * v).cwiseInverse();
      v = mass * (kernel.transpose() * u).cwiseInverse();
    }
    return (u.asDiagonal() * kernel.cwiseProduct(cost) * v.asDiagonal()).sum();
  }

  // Log-domain updates when exp(-C/eps) would underflow.
  Eigen::VectorXd f = Eigen::VectorXd::Zero(n), g = Eigen::VectorXd::Zero(n);
  const double log_mass = std::log(mass);
  auto softmin_rows = [&](const Eigen::VectorXd& pot, bool rows) {
    Eigen::VectorXd out(n);
    for (Index i = 0; i < n; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (Index j = 0; j < n; ++j) {
        const double c = rows ? cost(i, j) : cost(j, i);
        mx = std::max(mx, (pot(j) - c) / epsilon);
      }
      double s = 0.0;
      for (Index j = 0; j < n; ++j) {
        const double c = rows ? cost(i, j) : cost(j, i);
        s += std::exp((pot(j) - c) / epsilon - mx);
      }
      out(i) = epsilon * (log_mass - mx - std::log(s));
    }
    return out;
  };
  for (int it = 0; it < iterations; ++it) {
    f = softmin_rows(g, true);
    g = softmin_rows(f, false);
  }
  double total = 0.0;
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j) total += std::exp((f(i) + g(j) - cost(i, j)) / epsilon) * cost(i, j);
  return total;
}

double emd(const Points& a, const Points& b) {
  if (a.rows() != b.rows()) throw SizeError("emd: clouds must have equal cardinality");
  return a.rows() <= kEmdExactLimit ? emd_exact(a, b) : emd_sinkhorn(a, b);
}

MetricReport evaluate_completion(const Points& completed, const Points& truth, const Points& partial, double tau) {
  MetricReport r;
  r.cd_l2 = chamfer_l2(completed, truth);
  r.fscore = fscore(completed, truth, tau);
  r.emd = emd(completed, truth);
  r.uhd = uhd(partial, completed);
  return r;
}

}  // namespace pccforge
