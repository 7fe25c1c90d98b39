#pragma once

// Shared fixtures for the unit and acceptance suites.

#include <algorithm>
#include <numeric>
#include <string>

#include "pccforge/cref.hpp"
#include "pccforge/nn.hpp"

namespace support {

using namespace pccforge;

inline Points uniform_cloud(Index n, Rng& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  Points p(n, 3);
  for (Index i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) p(i, c) = u(rng);
  return p;
}

inline Points gaussian_cloud(Index n, Rng& rng, double sigma = 1.0) {
  std::normal_distribution<double> g(0.0, sigma);
  Points p(n, 3);
  for (Index i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) p(i, c) = g(rng);
  return p;
}

inline Points ellipsoid_surface(Index n, Rng& rng, double a, double b, double c) {
  Points p = gaussian_cloud(n, rng);
  for (Index i = 0; i < n; ++i) {
    p.row(i).normalize();
    p(i, 0) *= a;
    p(i, 1) *= b;
    p(i, 2) *= c;
  }
  return p;
}

inline Points rows_of(const Points& p, const std::vector<Index>& idx) {
  Points out(static_cast<Index>(idx.size()), 3);
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Index>(i)) = p.row(idx[i]);
  return out;
}

inline std::vector<Index> random_permutation(Index n, Rng& rng) {
  std::vector<Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Index{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  return perm;
}

/// A small refiner that still exercises every stage.
inline CrefSpec small_cref_spec() {
  CrefSpec spec;
  spec.refine_points = 96;
  spec.patch_size = 8;
  spec.topk = 6;
  spec.descriptor.widths = {8, 8, 12, 16};
  spec.descriptor.edge_k = 4;
  spec.angle_widths = {12, 8};
  spec.head_widths = {16, 8};
  return spec;
}

/// Partial = the half of an ellipsoid with x >= -0.1, coarse = a noisy full ellipsoid.
inline CrefSample small_cref_sample(Rng& rng, Index partial_points = 60, Index coarse_points = 80) {
  CrefSample s;
  s.truth = ellipsoid_surface(120, rng, 1.0, 0.6, 0.4);
  Points pool = ellipsoid_surface(4 * partial_points, rng, 1.0, 0.6, 0.4);
  std::vector<Index> keep;
  for (Index i = 0; i < pool.rows() && static_cast<Index>(keep.size()) < partial_points; ++i)
    if (pool(i, 0) >= -0.1) keep.push_back(i);
  s.partial = rows_of(pool, keep);
  s.coarse = ellipsoid_surface(coarse_points, rng, 1.0, 0.6, 0.4) + gaussian_cloud(coarse_points, rng, 0.03);
  return s;
}

/// Re-initialises every layer, including the zero-initialised output layers, so all
/// gradients are live.
inline void randomize_cref(ParamStore& params, const CrefSpec& spec, Rng& rng) {
  ParamStore fresh;
  init_descriptor(fresh, spec.descriptor, rng);
  for (const MlpSpec& m : {spec.angle_trunk(), spec.phi_head(), spec.psi_head(), spec.displacement()})
    init_mlp(fresh, m, rng);
  params.assign_from(fresh);
}

/// Restricts a differentiable function to the parameters whose names start with `prefix`.
inline Differentiable restricted(const Differentiable& full, const ParamStore& params, const std::string& prefix,
                                 ParamStore& subset) {
  subset = ParamStore();
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params.name(i).rfind(prefix, 0) == 0) subset.add(params.name(i), params.value(i));
  Differentiable op;
  op.loss = [full, params](const ParamStore& q) {
    ParamStore merged = params;
    merged.assign_from(q);
    return full.loss(merged);
  };
  op.gradient = [full, params](const ParamStore& q) {
    ParamStore merged = params;
    merged.assign_from(q);
    const ParamStore g = full.gradient(merged);
    ParamStore out = q.zeros_like();
    out.assign_from(g);
    return out;
  };
  return op;
}

/// cref_loss with a fixed random stream, as a function of the parameters.
inline Differentiable cref_objective(const CrefSpec& spec, const CrefSample& sample, Index query_cap) {
  Differentiable op;
  op.loss = [spec, sample, query_cap](const ParamStore& q) {
    Rng r(17);
    return cref_loss(q, spec, sample, query_cap, r, nullptr);
  };
  op.gradient = [spec, sample, query_cap](const ParamStore& q) {
    Rng r(17);
    ParamStore g = q.zeros_like();
    cref_loss(q, spec, sample, query_cap, r, &g);
    return g;
  };
  return op;
}

}  // namespace support
