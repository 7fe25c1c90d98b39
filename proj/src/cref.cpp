#include "pccforge/cref.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "pccforge/metrics.hpp"

namespace pccforge {

// ---------------------------------------------------------------------------------
// Mixed sampling

Index SampledCloud::frozen_count() const {
  return static_cast<Index>(std::count(frozen.begin(), frozen.end(), char{1}));
}

std::vector<Index> SampledCloud::adjustable() const {
  std::vector<Index> rows;
  for (std::size_t i = 0; i < frozen.size(); ++i)
    if (!frozen[i]) rows.push_back(static_cast<Index>(i));
  return rows;
}

SampledCloud mixed_sample(const Points& partial, const Points& coarse, Index n, Index start) {
  const Index np = partial.rows();
  const Index total = np + coarse.rows();
  if (n < 1 || n > total)
    throw SizeError("mixed_sample: cannot sample " + std::to_string(n) + " points from " + std::to_string(total));
  Points concat(total, 3);
  if (np > 0) concat.topRows(np) = partial;
  if (coarse.rows() > 0) concat.bottomRows(coarse.rows()) = coarse;
  const auto picked = farthest_point_sample(concat, n, start);

  SampledCloud out;
  out.points.resize(n, 3);
  out.frozen.assign(static_cast<std::size_t>(n), 0);
  out.source_index.assign(static_cast<std::size_t>(n), -1);
  for (Index i = 0; i < n; ++i) {
    const Index src = picked[static_cast<std::size_t>(i)];
    out.points.row(i) = concat.row(src);
    if (src < np) {
      out.frozen[static_cast<std::size_t>(i)] = 1;
      out.source_index[static_cast<std::size_t>(i)] = src;
    }
  }
  return out;
}

SampledCloud sample_for_refinement(const CrefSpec& spec, const Points& partial, const Points& coarse) {
  SampledCloud sampled;
  if (spec.mixed_sampling) {
    sampled = mixed_sample(partial, coarse, spec.refine_points, spec.fps_start);
  } else {
    // Coarse points only: nothing comes from the partial cloud, so nothing is frozen.
    sampled = mixed_sample(Points(0, 3), coarse, std::min(spec.refine_points, coarse.rows()),
                           std::min(spec.fps_start, coarse.rows() - 1));
  }
  if (!spec.freezing) std::fill(sampled.frozen.begin(), sampled.frozen.end(), char{0});
  return sampled;
}

// ---------------------------------------------------------------------------------
// Spec

CrefSpec CrefSpec::from_config(const RunConfig& c) {
  CrefSpec s;
  s.refine_points = c.refine_points;
  s.patch_size = c.patch_size;
  s.topk = c.topk;
  s.partial_patch_cap = c.partial_patch_cap;
  s.fps_start = c.fps_start;
  s.descriptor.widths = c.descriptor_widths;
  s.descriptor.edge_k = c.edge_k;
  s.angle_widths = c.angle_widths;
  s.head_widths = c.head_widths;
  s.similarity = c.similarity;
  s.mixed_sampling = c.mixed_sampling;
  s.freezing = c.freezing;
  s.rigid_transform = c.rigid_transform;
  return s;
}

MlpSpec CrefSpec::angle_trunk() const {
  std::vector<Index> widths{3 * patch_size};
  widths.insert(widths.end(), angle_widths.begin(), angle_widths.end());
  return {"ang.trunk", widths, true};
}
MlpSpec CrefSpec::phi_head() const { return {"ang.phi", {angle_widths.back(), 2}, false}; }
MlpSpec CrefSpec::psi_head() const { return {"ang.psi", {angle_widths.back(), 2}, false}; }
MlpSpec CrefSpec::displacement() const {
  std::vector<Index> widths{fused_dim()};
  widths.insert(widths.end(), head_widths.begin(), head_widths.end());
  widths.push_back(3);
  return {"disp", widths, false};
}

void init_cref(ParamStore& params, const CrefSpec& spec, Rng& rng) {
  init_descriptor(params, spec.descriptor, rng);
  init_mlp(params, spec.angle_trunk(), rng);
  init_mlp(params, spec.phi_head(), rng, /*zero_last=*/true);
  init_mlp(params, spec.psi_head(), rng, /*zero_last=*/true);
  init_mlp(params, spec.displacement(), rng, /*zero_last=*/true);
}

// ---------------------------------------------------------------------------------
// Canonicalisation

namespace {

Eigen::RowVector2d normalize_angle(const Eigen::RowVector2d& u) {
  const double r = u.norm();
  if (r < 1e-12) return {1.0, 0.0};
  return u / r;
}

Mat3 reflection_from(const Eigen::RowVector2d& cs) { return reflection_matrix<double>(cs(0), cs(1)); }

}  // namespace

CanonicalBatch canonicalize_batch(const ParamStore& params, const CrefSpec& spec, const std::vector<Patch>& patches) {
  const Index count = static_cast<Index>(patches.size());
  const Index k = spec.patch_size;
  CanonicalBatch out;
  CanonicalCache& c = out.cache;
  c.patch_size = k;
  c.rigid = spec.rigid_transform;
  c.aligned.resize(count * k, 3);
  c.r1.resize(static_cast<std::size_t>(count));
  out.frames.resize(static_cast<std::size_t>(count));
  for (Index b = 0; b < count; ++b) {
    const Patch& p = patches[static_cast<std::size_t>(b)];
    if (p.local_coords.rows() != k)
      throw ShapeError("canonicalize: patch has " + std::to_string(p.local_coords.rows()) + " points, expected " +
                       std::to_string(k));
    const Mat3 r1 = spec.rigid_transform ? rotation_to_z(p.normal) : Mat3::Identity();
    c.r1[static_cast<std::size_t>(b)] = r1;
    c.aligned.middleRows(b * k, k) = p.local_coords * r1.transpose();
  }
  if (!spec.rigid_transform) {
    out.coords = c.aligned;
    return out;
  }

  c.flattened.resize(count, 3 * k);
  for (Index b = 0; b < count; ++b)
    for (Index i = 0; i < k; ++i) c.flattened.block(b, 3 * i, 1, 3) = c.aligned.row(b * k + i);
  const Matrix h = mlp_forward(params, spec.angle_trunk(), c.flattened, &c.trunk);
  c.phi_u = mlp_forward(params, spec.phi_head(), h, &c.phi);
  c.psi_u = mlp_forward(params, spec.psi_head(), h, &c.psi);
  c.phi_u.col(0).array() += 1.0;
  c.psi_u.col(0).array() += 1.0;
  c.phi_cs.resize(count, 2);
  c.psi_cs.resize(count, 2);

  out.coords.resize(count * k, 3);
  for (Index b = 0; b < count; ++b) {
    c.phi_cs.row(b) = normalize_angle(c.phi_u.row(b));
    c.psi_cs.row(b) = normalize_angle(c.psi_u.row(b));
    const Mat3 r2 = rotation_about_z<double>(c.phi_cs(b, 0), c.phi_cs(b, 1));
    const Mat3 s = reflection_from(c.psi_cs.row(b));
    out.coords.middleRows(b * k, k) = c.aligned.middleRows(b * k, k) * r2.transpose() * s;
    RigidFrame& f = out.frames[static_cast<std::size_t>(b)];
    f.r1 = c.r1[static_cast<std::size_t>(b)];
    f.r2 = r2;
    f.psi = std::atan2(c.psi_cs(b, 1), c.psi_cs(b, 0));
  }
  return out;
}

void canonicalize_backward(const ParamStore& params, const CrefSpec& spec, const CanonicalBatch& batch,
                           const Matrix& grad_coords, const std::vector<Mat3>& grad_r2, ParamStore& grads) {
  const CanonicalCache& c = batch.cache;
  if (!c.rigid) return;
  const Index count = c.phi_cs.rows();
  const Index k = c.patch_size;
  Matrix g_phi(count, 2), g_psi(count, 2);
  for (Index b = 0; b < count; ++b) {
    const Matrix y = c.aligned.middleRows(b * k, k);
    const Mat3 r2 = rotation_about_z<double>(c.phi_cs(b, 0), c.phi_cs(b, 1));
    const Mat3 s = reflection_from(c.psi_cs.row(b));
    const Matrix z = y * r2.transpose();
    const Matrix g = grad_coords.middleRows(b * k, k);
    const Matrix gz = g * s;
    const Mat3 gs = z.transpose() * g;
    const Vec3 n(c.psi_cs(b, 0), c.psi_cs(b, 1), 0.0);
    const Vec3 gn = -2.0 * (gs + gs.transpose()) * n;
    Mat3 gr2 = gz.transpose() * y;
    if (!grad_r2.empty()) gr2 += grad_r2[static_cast<std::size_t>(b)];
    const Eigen::RowVector2d dphi(gr2(0, 0) + gr2(1, 1), gr2(1, 0) - gr2(0, 1));
    const Eigen::RowVector2d dpsi(gn(0), gn(1));
    auto through_norm = [](const Eigen::RowVector2d& u, const Eigen::RowVector2d& gcs) -> Eigen::RowVector2d {
      const double r = u.norm();
      if (r < 1e-12) return Eigen::RowVector2d::Zero();
      const Eigen::RowVector2d unit = u / r;
      return (gcs - gcs.dot(unit) * unit) / r;
    };
    g_phi.row(b) = through_norm(c.phi_u.row(b), dphi);
    g_psi.row(b) = through_norm(c.psi_u.row(b), dpsi);
  }
  Matrix gh = mlp_backward(params, spec.phi_head(), c.phi, g_phi, grads);
  gh += mlp_backward(params, spec.psi_head(), c.psi, g_psi, grads);
  mlp_backward(params, spec.angle_trunk(), c.trunk, gh, grads);
}

CanonicalPatch canonicalize_patch(const Patch& patch, const ParamStore& params, const CrefSpec& spec) {
  CanonicalBatch batch = canonicalize_batch(params, spec, {patch});
  return {Points(batch.coords), batch.frames.front()};
}

CanonicalPatch canonicalize_with_angles(const Patch& patch, double phi, double psi) {
  CanonicalPatch out;
  out.frame.r1 = rotation_to_z(patch.normal);
  out.frame.r2 = rotation_about_z(phi);
  out.frame.psi = psi;
  const Mat3 s = reflection_matrix(psi);
  out.coords = patch.local_coords * (s * out.frame.r2 * out.frame.r1).transpose();
  return out;
}

// ---------------------------------------------------------------------------------
// Similarity

Vector euclidean_similarity(const Vec3& q, const Points& partial) {
  if (partial.rows() == 0) throw SizeError("euclidean_similarity: empty partial cloud");
  Vector out(partial.rows());
  for (Index i = 0; i < partial.rows(); ++i) out(i) = (partial.row(i).transpose() - q).squaredNorm();
  return out;
}

namespace {

Matrix normalized_rows(const Matrix& f) {
  Matrix out = f;
  for (Index i = 0; i < f.rows(); ++i) {
    const double n = f.row(i).norm();
    out.row(i) = n > 0.0 ? Matrix(f.row(i) / n) : Matrix::Zero(1, f.cols());
  }
  return out;
}

}  // namespace

Vector feature_similarity(const RowVector& fq, const Matrix& fp) {
  if (fq.size() != fp.cols()) throw ShapeError("feature_similarity: descriptor width mismatch");
  return cosine_matrix(fq, fp).row(0).transpose();
}

Matrix cosine_matrix(const Matrix& fq, const Matrix& fp) {
  if (fq.cols() != fp.cols()) throw ShapeError("cosine_matrix: descriptor width mismatch");
  return normalized_rows(fq) * normalized_rows(fp).transpose();
}

Matrix squared_distance_matrix(const Points& q, const Points& p) {
  Matrix out(q.rows(), p.rows());
  for (Index j = 0; j < p.rows(); ++j)
    for (Index i = 0; i < q.rows(); ++i) out(i, j) = (q.row(i) - p.row(j)).squaredNorm();
  return out;
}

Matrix combine_similarity(const Matrix& w1, const Matrix& w2, SimilarityMode mode) {
  if (w1.rows() != w2.rows() || w1.cols() != w2.cols()) throw ShapeError("combine_similarity: shape mismatch");
  switch (mode) {
    case SimilarityMode::Sum: return (-w1.array()).exp() + w2.array().exp();
    case SimilarityMode::Product: return (w2.array() - w1.array()).exp();
    case SimilarityMode::EuclideanOnly: return (-w1.array()).exp();
    case SimilarityMode::FeatureOnly: return w2.array().exp();
  }
  throw ConfigError("combine_similarity: unknown mode");
}

std::vector<Index> topk_indices(const Eigen::Ref<const RowVector>& row, Index k) {
  const Index m = row.size();
  if (k < 1 || k > m) throw SizeError("topk: k=" + std::to_string(k) + " outside [1, " + std::to_string(m) + "]");
  std::vector<Index> order(static_cast<std::size_t>(m));
  std::iota(order.begin(), order.end(), Index{0});
  std::partial_sort(order.begin(), order.begin() + k, order.end(),
                    [&](Index a, Index b) { return row(a) > row(b) || (row(a) == row(b) && a < b); });
  order.resize(static_cast<std::size_t>(k));
  return order;
}

Aggregation aggregate_topk(const Matrix& w, const Matrix& fp, const Matrix& fq, Index k) {
  if (w.rows() != fq.rows() || w.cols() != fp.rows() || fp.cols() != fq.cols())
    throw ShapeError("aggregate_topk: inconsistent shapes");
  const Index rows = w.rows();
  const Index d = fp.cols();
  Aggregation agg;
  agg.k = k;
  agg.fused.resize(rows, 3 * d);
  agg.selected.resize(static_cast<std::size_t>(rows * k));
  agg.max_from.resize(static_cast<std::size_t>(rows * d));
  for (Index j = 0; j < rows; ++j) {
    const auto sel = topk_indices(w.row(j), k);
    std::copy(sel.begin(), sel.end(), agg.selected.begin() + j * k);
    RowVector mx = fp.row(sel.front());
    RowVector sum = RowVector::Zero(d);
    std::int32_t* from = agg.max_from.data() + j * d;
    std::fill(from, from + d, static_cast<std::int32_t>(sel.front()));
    for (Index s : sel) {
      sum += fp.row(s);
      for (Index c = 0; c < d; ++c) {
        if (fp(s, c) > mx(c)) {
          mx(c) = fp(s, c);
          from[c] = static_cast<std::int32_t>(s);
        }
      }
    }
    agg.fused.block(j, 0, 1, d) = fq.row(j);
    agg.fused.block(j, d, 1, d) = mx;
    agg.fused.block(j, 2 * d, 1, d) = sum / static_cast<double>(k);
  }
  return agg;
}

namespace {

/// Scatters dL/d(fused) back onto Fq and Fp.
void aggregate_backward(const Aggregation& agg, const Matrix& g_fused, Matrix& g_fq, Matrix& g_fp) {
  const Index d = g_fq.cols();
  const Index k = agg.k;
  g_fq += g_fused.leftCols(d);
  for (Index j = 0; j < g_fused.rows(); ++j) {
    const std::int32_t* from = agg.max_from.data() + j * d;
    for (Index c = 0; c < d; ++c) g_fp(from[c], c) += g_fused(j, d + c);
    const RowVector g_mean = g_fused.block(j, 2 * d, 1, d) / static_cast<double>(k);
    for (Index s = 0; s < k; ++s) g_fp.row(agg.selected[static_cast<std::size_t>(j * k + s)]) += g_mean;
  }
}

}  // namespace

Vector similarity_heatmap(const Matrix& w, Index row) {
  if (row < 0 || row >= w.rows()) throw SizeError("similarity_heatmap: row index out of range");
  const RowVector r = w.row(row);
  const double lo = r.minCoeff();
  const double hi = r.maxCoeff();
  if (!(hi > lo)) return Vector::Zero(r.size());
  return ((r.array() - lo) / (hi - lo)).transpose();
}

// ---------------------------------------------------------------------------------
// Refinement

namespace {

struct EncodedPatches {
  CanonicalBatch canon;
  DescriptorCache desc;
  Matrix descriptors;
};

EncodedPatches encode_patches(const ParamStore& params, const CrefSpec& spec, const std::vector<Patch>& patches,
                              bool keep_cache) {
  EncodedPatches e;
  e.canon = canonicalize_batch(params, spec, patches);
  e.descriptors =
      descriptor_forward(params, spec.descriptor, e.canon.coords, spec.patch_size, keep_cache ? &e.desc : nullptr);
  return e;
}

std::vector<Patch> patches_around(const Points& cloud, const std::vector<Index>& centers, Index k) {
  if (k > cloud.rows())
    throw SizeError("patch size " + std::to_string(k) + " exceeds cloud size " + std::to_string(cloud.rows()));
  Points queries(static_cast<Index>(centers.size()), 3);
  for (std::size_t i = 0; i < centers.size(); ++i) queries.row(static_cast<Index>(i)) = cloud.row(centers[i]);
  const auto nb = knn_batch(cloud, queries, k);
  std::vector<Patch> out;
  out.reserve(centers.size());
  for (std::size_t i = 0; i < centers.size(); ++i)
    out.push_back(make_patch(cloud, centers[i], std::span<const Index>(nb.data() + i * static_cast<std::size_t>(k),
                                                                         static_cast<std::size_t>(k))));
  return out;
}

std::vector<Index> partial_patch_centers(const CrefSpec& spec, const Points& partial) {
  const Index m = partial.rows();
  if (spec.partial_patch_cap > 0 && spec.partial_patch_cap < m)
    return farthest_point_sample(partial, spec.partial_patch_cap, 0);
  std::vector<Index> all(static_cast<std::size_t>(m));
  std::iota(all.begin(), all.end(), Index{0});
  return all;
}

struct RefineWork {
  RefineResult result;
  std::vector<Patch> patches;
  EncodedPatches encoded;
  Aggregation agg;
  MlpCache head_cache;
  Matrix offsets_canonical;
};

void refine_forward(const ParamStore& params, const CrefSpec& spec, const Points& partial, SampledCloud sampled,
                    const std::vector<Index>& rows, bool keep_cache, RefineWork& work) {
  if (partial.rows() == 0) throw SizeError("refine: empty partial cloud");
  RefineResult& r = work.result;
  r.sampled = std::move(sampled);
  r.refined_rows = rows;
  r.output = r.sampled.points;
  r.partial_centers = partial_patch_centers(spec, partial);
  const Index nr = static_cast<Index>(rows.size());
  const Index m = static_cast<Index>(r.partial_centers.size());
  if (spec.topk > m)
    throw SizeError("refine: topk " + std::to_string(spec.topk) + " exceeds partial patch count " + std::to_string(m));
  r.offsets = Points::Zero(nr, 3);
  r.frames.clear();
  if (nr == 0) return;

  const Points& q = r.sampled.points;
  work.patches = patches_around(q, rows, spec.patch_size);
  auto p_patches = patches_around(partial, r.partial_centers, spec.patch_size);
  work.patches.insert(work.patches.end(), std::make_move_iterator(p_patches.begin()),
                      std::make_move_iterator(p_patches.end()));
  work.encoded = encode_patches(params, spec, work.patches, keep_cache);
  const Matrix fq = work.encoded.descriptors.topRows(nr);
  const Matrix fp = work.encoded.descriptors.bottomRows(m);

  Points q_rows(nr, 3), p_rows(m, 3);
  for (Index j = 0; j < nr; ++j) q_rows.row(j) = q.row(rows[static_cast<std::size_t>(j)]);
  for (Index i = 0; i < m; ++i) p_rows.row(i) = partial.row(r.partial_centers[static_cast<std::size_t>(i)]);
  r.similarity = combine_similarity(squared_distance_matrix(q_rows, p_rows), cosine_matrix(fq, fp), spec.similarity);
  work.agg = aggregate_topk(r.similarity, fp, fq, spec.topk);

  const Index d = spec.descriptor_dim();
  Matrix head_in(nr, spec.fused_dim());
  head_in.leftCols(3 * d) = work.agg.fused;
  const Index k = spec.patch_size;
  for (Index j = 0; j < nr; ++j) head_in.block(j, 3 * d, 1, 3) = work.encoded.canon.coords.row(j * k);
  work.offsets_canonical = mlp_forward(params, spec.displacement(), head_in, keep_cache ? &work.head_cache : nullptr);

  r.frames.assign(work.encoded.canon.frames.begin(), work.encoded.canon.frames.begin() + nr);
  for (Index j = 0; j < nr; ++j) {
    const Vec3 o = work.offsets_canonical.row(j).transpose();
    const Vec3 w = invert_frame(o, r.frames[static_cast<std::size_t>(j)]);
    r.offsets.row(j) = w.transpose();
    r.output.row(rows[static_cast<std::size_t>(j)]) += w.transpose();
  }
}

void refine_backward(const ParamStore& params, const CrefSpec& spec, const RefineWork& work, const Points& grad_output,
                     ParamStore& grads) {
  const RefineResult& r = work.result;
  const Index nr = static_cast<Index>(r.refined_rows.size());
  if (nr == 0) return;
  const Index d = spec.descriptor_dim();
  const Index k = spec.patch_size;
  const Index total = static_cast<Index>(work.patches.size());

  Matrix g_offsets(nr, 3);
  std::vector<Mat3> g_r2(static_cast<std::size_t>(total), Mat3::Zero());
  for (Index j = 0; j < nr; ++j) {
    const RigidFrame& f = r.frames[static_cast<std::size_t>(j)];
    const Vec3 gw = grad_output.row(r.refined_rows[static_cast<std::size_t>(j)]).transpose();
    const Vec3 gv = f.r1 * gw;  // o_w = r1^T v, v = r2^T o
    const Vec3 o = work.offsets_canonical.row(j).transpose();
    g_offsets.row(j) = (f.r2 * gv).transpose();
    g_r2[static_cast<std::size_t>(j)] = o * gv.transpose();
  }
  const Matrix g_head_in = mlp_backward(params, spec.displacement(), work.head_cache, g_offsets, grads);

  Matrix g_desc = Matrix::Zero(total, d);
  Matrix g_fq = Matrix::Zero(nr, d);
  Matrix g_fp = Matrix::Zero(total - nr, d);
  aggregate_backward(work.agg, g_head_in.leftCols(3 * d), g_fq, g_fp);
  g_desc.topRows(nr) = g_fq;
  g_desc.bottomRows(total - nr) = g_fp;

  Matrix g_coords = descriptor_backward(params, spec.descriptor, work.encoded.desc, g_desc, grads);
  for (Index j = 0; j < nr; ++j) g_coords.row(j * k) += g_head_in.block(j, 3 * d, 1, 3);
  canonicalize_backward(params, spec, work.encoded.canon, g_coords, g_r2, grads);
}

}  // namespace

RefineResult refine_sampled(const ParamStore& params, const CrefSpec& spec, const Points& partial,
                            SampledCloud sampled, const std::vector<Index>& rows) {
  RefineWork work;
  refine_forward(params, spec, partial, std::move(sampled), rows, false, work);
  return std::move(work.result);
}

RefineResult refine(const ParamStore& params, const CrefSpec& spec, const Points& partial, const Points& coarse) {
  SampledCloud sampled = sample_for_refinement(spec, partial, coarse);
  const auto rows = sampled.adjustable();
  RefineResult result = refine_sampled(params, spec, partial, std::move(sampled), rows);
  if (result.output.rows() != std::min(spec.refine_points, result.sampled.size()))
    throw SizeError("refine: output cardinality mismatch");
  return result;
}

SimilarityRows similarity_for_points(const ParamStore& params, const CrefSpec& spec, const Points& partial,
                                     const Points& cloud, const std::vector<Index>& rows) {
  SimilarityRows out;
  out.partial_centers = partial_patch_centers(spec, partial);
  auto patches = patches_around(cloud, rows, spec.patch_size);
  auto p_patches = patches_around(partial, out.partial_centers, spec.patch_size);
  patches.insert(patches.end(), std::make_move_iterator(p_patches.begin()), std::make_move_iterator(p_patches.end()));
  const EncodedPatches enc = encode_patches(params, spec, patches, false);
  const Index nr = static_cast<Index>(rows.size());
  const Index m = static_cast<Index>(out.partial_centers.size());
  Points q_rows(nr, 3), p_rows(m, 3);
  for (Index j = 0; j < nr; ++j) q_rows.row(j) = cloud.row(rows[static_cast<std::size_t>(j)]);
  for (Index i = 0; i < m; ++i) p_rows.row(i) = partial.row(out.partial_centers[static_cast<std::size_t>(i)]);
  out.values = combine_similarity(squared_distance_matrix(q_rows, p_rows),
                                  cosine_matrix(enc.descriptors.topRows(nr), enc.descriptors.bottomRows(m)),
                                  spec.similarity);
  return out;
}

double cref_loss(const ParamStore& params, const CrefSpec& spec, const CrefSample& sample, Index query_cap, Rng& rng,
                 ParamStore* grads) {
  SampledCloud sampled = sample_for_refinement(spec, sample.partial, sample.coarse);
  std::vector<Index> rows = sampled.adjustable();
  if (query_cap > 0 && static_cast<Index>(rows.size()) > query_cap) {
    std::shuffle(rows.begin(), rows.end(), rng);
    rows.resize(static_cast<std::size_t>(query_cap));
    std::sort(rows.begin(), rows.end());
  }
  RefineWork work;
  refine_forward(params, spec, sample.partial, std::move(sampled), rows, grads != nullptr, work);
  Points grad_output;
  const double loss = chamfer_l2_with_grad(work.result.output, sample.truth, grad_output);
  if (grads) refine_backward(params, spec, work, grad_output, *grads);
  return loss;
}

ParamStore train_cref(const std::vector<CrefSample>& dataset, const CrefSpec& spec, ParamStore params,
                      const CrefTrainOptions& options) {
  if (dataset.empty()) throw SizeError("train_cref: empty dataset");
  Rng rng(options.seed + static_cast<std::uint64_t>(options.start_step) * 104729u);
  MomentumSgd optimizer(options.learning_rate, options.momentum);
  ParamStore grads = params.zeros_like();
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Index step = options.start_step;
  for (Index epoch = 0; epoch < options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t idx : order) {
      grads.set_zero();
      const double loss = cref_loss(params, spec, dataset[idx], options.query_cap, rng, &grads);
      ++step;
      if (!std::isfinite(loss)) {
        std::ostringstream os;
        os << "train_cref: non-finite loss " << loss << " at step " << step;
        throw TrainingError(os.str());
      }
      clip_grad_norm(grads, options.grad_clip);
      optimizer.step(params, grads);
      if (options.on_step) options.on_step(step, loss);
    }
    if (options.on_epoch) options.on_epoch(epoch + 1);
  }
  return params;
}

}  // namespace pccforge
