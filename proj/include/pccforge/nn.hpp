#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "pccforge/types.hpp"

namespace pccforge {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr double kLeakySlope = 0.2;

/// Named dense parameters with stable insertion order.
///
/// Weights are stored as (out x in) matrices and biases as (1 x out) rows. A gradient
/// store is a ParamStore with the same names and shapes.
class ParamStore {
 public:
  Matrix& add(const std::string& name, Matrix value);
  Matrix& at(const std::string& name);
  const Matrix& at(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t size() const { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Matrix& value(std::size_t i) { return values_[i]; }
  const Matrix& value(std::size_t i) const { return values_[i]; }
  Index scalar_count() const;

  ParamStore zeros_like() const;
  void set_zero();
  void axpy(double alpha, const ParamStore& other);
  double squared_norm() const;
  bool all_finite() const;
  /// Copies the entries of `other` whose names appear here; shapes must match.
  void assign_from(const ParamStore& other);

 private:
  std::vector<std::string> names_;
  std::vector<Matrix> values_;
  std::map<std::string, std::size_t> index_;
};

// Element-wise helpers.
inline Matrix leaky_relu(const Matrix& x) { return x.cwiseMax(kLeakySlope * x); }
inline Matrix leaky_relu_grad(const Matrix& pre, const Matrix& grad) {
  return (pre.array() > 0.0).select(grad, kLeakySlope * grad);
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) dense layer.
void init_dense(ParamStore& params, const std::string& name, Index in, Index out, Rng& rng,
                bool zero = false);
Matrix dense_forward(const ParamStore& params, const std::string& name, const Matrix& x);
/// Accumulates dW, db into `grads` and returns dL/dx.
Matrix dense_backward(const ParamStore& params, const std::string& name, const Matrix& x,
                      const Matrix& grad_out, ParamStore& grads);

// ---------------------------------------------------------------------------------
// MLP

struct MlpSpec {
  std::string name;           // parameter prefix
  std::vector<Index> widths;  // widths.front() = input dim, widths.back() = output dim
  bool activate_output = false;

  Index layers() const { return static_cast<Index>(widths.size()) - 1; }
  std::string layer(Index l) const { return name + "." + std::to_string(l); }
};

struct MlpCache {
  std::vector<Matrix> inputs;
  std::vector<Matrix> pre;
};

/// `zero_last` zero-initialises the final layer so the network starts at output 0.
void init_mlp(ParamStore& params, const MlpSpec& spec, Rng& rng, bool zero_last = false);
Matrix mlp_forward(const ParamStore& params, const MlpSpec& spec, const Matrix& input, MlpCache* cache = nullptr);
Matrix mlp_backward(const ParamStore& params, const MlpSpec& spec, const MlpCache& cache, const Matrix& grad_out,
                    ParamStore& grads);

// ---------------------------------------------------------------------------------
// EdgeConv

/// Fixed-degree neighbour lists: row i owns neighbors[i*k, i*k + k).
struct NeighborGraph {
  Index k = 0;
  std::vector<Index> neighbors;
  Index rows() const { return k == 0 ? 0 : static_cast<Index>(neighbors.size()) / k; }
};

struct EdgeConvSpec {
  std::string name;
  Index in = 0;
  Index out = 0;
};

struct EdgeConvCache {
  Matrix input;
  Matrix pre;
  std::vector<std::int32_t> argmax;  // rows x out, row-major, winning neighbour row
};

void init_edgeconv(ParamStore& params, const EdgeConvSpec& spec, Rng& rng);

/// out_i = max_j lrelu(W [f_i, f_j - f_i] + b) over the neighbours j of i.
///
/// The affine map splits as (Wa - Wb) f_i + Wb f_j, and lrelu is monotone, so the max over
/// edges reduces to a per-channel max of Wb f_j.
Matrix edgeconv_forward(const ParamStore& params, const EdgeConvSpec& spec, const Matrix& features,
                        const NeighborGraph& graph, EdgeConvCache* cache = nullptr);
Matrix edgeconv_backward(const ParamStore& params, const EdgeConvSpec& spec, const EdgeConvCache& cache,
                         const Matrix& grad_out, ParamStore& grads);

/// kNN graph inside consecutive blocks of `block` rows (one block per patch), in the
/// feature space spanned by the columns of `features`.
NeighborGraph block_knn_graph(const Matrix& features, Index block, Index k);

// ---------------------------------------------------------------------------------
// Pooling

struct SegmentMax {
  Matrix values;                     // segments x cols
  std::vector<std::int32_t> argmax;  // segments x cols, row-major, absolute row index
};
/// Max over consecutive segments of `segment` rows.
SegmentMax segment_max(const Matrix& x, Index segment);
Matrix segment_max_backward(const SegmentMax& pooled, Index rows, const Matrix& grad);

// ---------------------------------------------------------------------------------
// Patch descriptor: stacked EdgeConv layers then a max-pool over each patch.

struct DescriptorSpec {
  std::string name = "desc";
  std::vector<Index> widths{64, 64, 128, 256};
  Index edge_k = 16;

  Index output_dim() const { return widths.back(); }
  EdgeConvSpec layer(std::size_t l) const;
};

struct DescriptorCache {
  Index patch_size = 0;
  std::vector<NeighborGraph> graphs;  // per layer (shared objects are copied)
  std::vector<EdgeConvCache> layers;
  SegmentMax pooled;
};

void init_descriptor(ParamStore& params, const DescriptorSpec& spec, Rng& rng);

/// `stacked` holds patches x patch_size rows of canonical coordinates. Returns one
/// descriptor row per patch.
///
/// The neighbour graph is built from coordinates for the first layer, reused by the
/// middle layers and rebuilt in feature space before the last layer.
Matrix descriptor_forward(const ParamStore& params, const DescriptorSpec& spec, const Matrix& stacked,
                          Index patch_size, DescriptorCache* cache = nullptr);
/// Returns dL/d(stacked coordinates).
Matrix descriptor_backward(const ParamStore& params, const DescriptorSpec& spec, const DescriptorCache& cache,
                           const Matrix& grad_descriptors, ParamStore& grads);

Vector patch_descriptor(const ParamStore& params, const DescriptorSpec& spec, const Points& patch_coords);

// ---------------------------------------------------------------------------------
// PointNet encoder

struct PointNetSpec {
  std::string name = "enc";
  std::vector<Index> point_widths{3, 64, 128, 256};
  std::vector<Index> head_widths{256, 512};

  MlpSpec point_mlp() const { return {name + ".point", point_widths, true}; }
  MlpSpec head_mlp() const { return {name + ".head", head_widths, false}; }
  Index latent_dim() const { return head_widths.back(); }
};

struct PointNetCache {
  MlpCache point;
  SegmentMax pooled;
  MlpCache head;
  Index rows = 0;
};

void init_pointnet(ParamStore& params, const PointNetSpec& spec, Rng& rng);
/// Per-point MLP, global max-pool, MLP head. Returns a latent row vector.
RowVector pointnet_encode(const ParamStore& params, const PointNetSpec& spec, const Points& cloud,
                          PointNetCache* cache = nullptr);
void pointnet_backward(const ParamStore& params, const PointNetSpec& spec, const PointNetCache& cache,
                       const RowVector& grad_latent, ParamStore& grads);

// ---------------------------------------------------------------------------------
// Training utilities

/// Gradient descent with heavy-ball momentum: v <- mu v + g, p <- p - lr v.
class MomentumSgd {
 public:
  MomentumSgd(double learning_rate, double momentum = 0.9) : lr_(learning_rate), momentum_(momentum) {}
  void step(ParamStore& params, const ParamStore& grads);
  double learning_rate() const { return lr_; }

 private:
  double lr_;
  double momentum_;
  ParamStore velocity_;
};

/// Rescales `grads` so its global L2 norm is at most `max_norm`; returns the original norm.
double clip_grad_norm(ParamStore& grads, double max_norm);

/// A scalar function of parameters together with its analytic gradient.
struct Differentiable {
  std::function<double(const ParamStore&)> loss;
  std::function<ParamStore(const ParamStore&)> gradient;
};

/// Largest relative error between analytic gradients and central differences over
/// `probes` randomly chosen parameter entries. Entries where both gradients are below
/// 1e-6 in magnitude are compared against that floor.
double grad_check(const Differentiable& op, const ParamStore& params, Index probes, Rng& rng, double h = 1e-5);

/// Same comparison for a function of a plain matrix input.
double grad_check_input(const std::function<double(const Matrix&)>& loss, const Matrix& input,
                        const Matrix& analytic, Index probes, Rng& rng, double h = 1e-5);

}  // namespace pccforge
