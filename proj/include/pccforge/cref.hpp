#pragma once

#include <functional>
#include <vector>

#include "pccforge/config.hpp"
#include "pccforge/geometry.hpp"
#include "pccforge/nn.hpp"
#include "pccforge/types.hpp"

namespace pccforge {

/// Output of mixed sampling: FPS over partial ∪ coarse with partial-origin points frozen.
struct SampledCloud {
  Points points;
  std::vector<char> frozen;
  std::vector<Index> source_index;  // index into the partial cloud, or -1

  Index size() const { return points.rows(); }
  Index frozen_count() const;
  std::vector<Index> adjustable() const;
};

/// Concatenates partial then coarse, runs FPS from `start` and freezes every selected
/// partial point.
SampledCloud mixed_sample(const Points& partial, const Points& coarse, Index n, Index start = 0);

struct CrefSpec {
  Index refine_points = 2048;
  Index patch_size = 64;
  Index topk = 64;
  Index partial_patch_cap = 0;
  Index fps_start = 0;
  DescriptorSpec descriptor;
  std::vector<Index> angle_widths{128, 64};
  std::vector<Index> head_widths{256, 128};
  SimilarityMode similarity = SimilarityMode::Sum;
  bool mixed_sampling = true;
  bool freezing = true;
  bool rigid_transform = true;

  static CrefSpec from_config(const RunConfig& config);

  Index descriptor_dim() const { return descriptor.output_dim(); }
  /// Fused features: own descriptor, max and mean of the top-k partial descriptors,
  /// and the canonical position of the point inside its own patch.
  Index fused_dim() const { return 3 * descriptor_dim() + 3; }
  MlpSpec angle_trunk() const;
  MlpSpec phi_head() const;
  MlpSpec psi_head() const;
  MlpSpec displacement() const;
};

/// Zero-initialises the last displacement layer so an untrained refiner is the identity.
void init_cref(ParamStore& params, const CrefSpec& spec, Rng& rng);

// ---------------------------------------------------------------------------------
// Canonicalisation

struct CanonicalPatch {
  Points coords;
  RigidFrame frame;
};

/// Normal alignment, then rotation about e_z by (cos, sin) = normalise(1 + a, b) where
/// (a, b) is the phi network output, then reflection across the plane given the same
/// way by the psi network. Zero network outputs mean phi = psi = 0.
CanonicalPatch canonicalize_patch(const Patch& patch, const ParamStore& params, const CrefSpec& spec);

/// Same transform with explicit angles instead of the angle networks.
CanonicalPatch canonicalize_with_angles(const Patch& patch, double phi, double psi);

struct CanonicalCache {
  Index patch_size = 0;
  bool rigid = true;
  Matrix aligned;    // patches*K x 3, after normal alignment
  Matrix flattened;  // patches x 3K angle network input
  MlpCache trunk, phi, psi;
  Matrix phi_u, psi_u;    // un-normalised (1 + a, b)
  Matrix phi_cs, psi_cs;  // normalised (cos, sin)
  std::vector<Mat3> r1;
};

struct CanonicalBatch {
  Matrix coords;  // patches*K x 3
  std::vector<RigidFrame> frames;
  CanonicalCache cache;
};

CanonicalBatch canonicalize_batch(const ParamStore& params, const CrefSpec& spec, const std::vector<Patch>& patches);

/// `grad_coords` is dL/d(canonical coords); `grad_r2` (optional, one per patch) adds
/// dL/d(r2) from downstream uses of the in-plane rotation.
void canonicalize_backward(const ParamStore& params, const CrefSpec& spec, const CanonicalBatch& batch,
                           const Matrix& grad_coords, const std::vector<Mat3>& grad_r2, ParamStore& grads);

// ---------------------------------------------------------------------------------
// Similarity and aggregation

/// Squared Euclidean distances from q to every partial point.
Vector euclidean_similarity(const Vec3& q, const Points& partial);

/// Cosine similarity of `fq` with every row of `fp`; zero-norm descriptors give 0.
Vector feature_similarity(const RowVector& fq, const Matrix& fp);

/// Row-wise cosine matrix between two descriptor sets.
Matrix cosine_matrix(const Matrix& fq, const Matrix& fp);
Matrix squared_distance_matrix(const Points& q, const Points& p);

/// Combines squared distances and cosines into strictly positive similarities.
Matrix combine_similarity(const Matrix& w1, const Matrix& w2, SimilarityMode mode = SimilarityMode::Sum);

/// Column indices of the k largest entries of a row, ties broken by lowest index.
std::vector<Index> topk_indices(const Eigen::Ref<const RowVector>& row, Index k);

struct Aggregation {
  Matrix fused;                        // rows x 3D: [Fq, max, mean]
  std::vector<Index> selected;         // rows x k, row-major
  std::vector<std::int32_t> max_from;  // rows x D, row-major, winning Fp row
  Index k = 0;
};

Aggregation aggregate_topk(const Matrix& w, const Matrix& fp, const Matrix& fq, Index k);

/// Min-max normalised similarity row; a constant row maps to zeros.
Vector similarity_heatmap(const Matrix& w, Index row);

// ---------------------------------------------------------------------------------
// Refinement

struct RefineResult {
  Points output;
  SampledCloud sampled;
  std::vector<Index> refined_rows;     // indices of `sampled` that received an offset
  std::vector<Index> partial_centers;  // partial indices forming the columns of `similarity`
  Matrix similarity;                   // refined_rows x partial_centers
  std::vector<RigidFrame> frames;      // one per refined row
  Points offsets;                      // world-frame offsets, one per refined row
};

/// Full refiner: mixed sampling, patches, canonicalisation, descriptors, similarity,
/// top-k aggregation, displacement prediction and rotation back to the world frame.
RefineResult refine(const ParamStore& params, const CrefSpec& spec, const Points& partial, const Points& coarse);

/// Runs the refiner on an already sampled cloud. Only `rows` are displaced.
RefineResult refine_sampled(const ParamStore& params, const CrefSpec& spec, const Points& partial,
                            SampledCloud sampled, const std::vector<Index>& rows);

/// Similarity rows of W for arbitrary points of `cloud` (heatmaps and diagnostics).
struct SimilarityRows {
  Matrix values;
  std::vector<Index> partial_centers;
};
SimilarityRows similarity_for_points(const ParamStore& params, const CrefSpec& spec, const Points& partial,
                                     const Points& cloud, const std::vector<Index>& rows);

/// The sampled cloud the refiner starts from, honouring the mixed-sampling and freezing
/// switches.
SampledCloud sample_for_refinement(const CrefSpec& spec, const Points& partial, const Points& coarse);

struct CrefSample {
  Points partial;
  Points coarse;
  Points truth;
};

/// L2 Chamfer loss of the refined cloud against `truth` with gradients accumulated into
/// `grads`. `query_cap` > 0 refines a random subset of that many adjustable points.
double cref_loss(const ParamStore& params, const CrefSpec& spec, const CrefSample& sample, Index query_cap, Rng& rng,
                 ParamStore* grads);

struct CrefTrainOptions {
  Index epochs = 50;
  double learning_rate = 0.01;
  double momentum = 0.9;
  double grad_clip = 1.0;
  Index query_cap = 0;
  std::uint64_t seed = 1;
  Index start_step = 0;
  std::function<void(Index, double)> on_step;
  std::function<void(Index)> on_epoch;
};

ParamStore train_cref(const std::vector<CrefSample>& dataset, const CrefSpec& spec, ParamStore params,
                      const CrefTrainOptions& options);

}  // namespace pccforge
