#include "pccforge/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace pccforge {

// ---------------------------------------------------------------------------------
// ParamStore

Matrix& ParamStore::add(const std::string& name, Matrix value) {
  if (contains(name)) throw ConfigError("duplicate parameter '" + name + "'");
  index_[name] = values_.size();
  names_.push_back(name);
  values_.push_back(std::move(value));
  return values_.back();
}

Matrix& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ShapeError("unknown parameter '" + name + "'");
  return values_[it->second];
}

const Matrix& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ShapeError("unknown parameter '" + name + "'");
  return values_[it->second];
}

Index ParamStore::scalar_count() const {
  Index total = 0;
  for (const auto& v : values_) total += v.size();
  return total;
}

ParamStore ParamStore::zeros_like() const {
  ParamStore out;
  for (std::size_t i = 0; i < size(); ++i) out.add(names_[i], Matrix::Zero(values_[i].rows(), values_[i].cols()));
  return out;
}

void ParamStore::set_zero() {
  for (auto& v : values_) v.setZero();
}

void ParamStore::axpy(double alpha, const ParamStore& other) {
  for (std::size_t i = 0; i < size(); ++i) values_[i] += alpha * other.at(names_[i]);
}

double ParamStore::squared_norm() const {
  double total = 0.0;
  for (const auto& v : values_) total += v.squaredNorm();
  return total;
}

bool ParamStore::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](const Matrix& m) { return m.allFinite(); });
}

void ParamStore::assign_from(const ParamStore& other) {
  for (std::size_t i = 0; i < size(); ++i) {
    if (!other.contains(names_[i])) continue;
    const Matrix& src = other.at(names_[i]);
    if (src.rows() != values_[i].rows() || src.cols() != values_[i].cols())
      throw ShapeError("parameter '" + names_[i] + "' has mismatched shape");
    values_[i] = src;
  }
}

// ---------------------------------------------------------------------------------
// Dense

void init_dense(ParamStore& params, const std::string& name, Index in, Index out, Rng& rng, bool zero) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::uniform_real_distribution<double> uniform(-bound, bound);
  Matrix w(out, in);
  Matrix b(1, out);
  if (zero) {
    w.setZero();
    b.setZero();
  } else {
    for (Index i = 0; i < w.size(); ++i) w(i) = uniform(rng);
    for (Index i = 0; i < b.size(); ++i) b(i) = uniform(rng);
  }
  params.add(name + ".W", std::move(w));
  params.add(name + ".b", std::move(b));
}

Matrix dense_forward(const ParamStore& params, const std::string& name, const Matrix& x) {
  const Matrix& w = params.at(name + ".W");
  const Matrix& b = params.at(name + ".b");
  if (x.cols() != w.cols())
    throw ShapeError(name + ": input has " + std::to_string(x.cols()) + " columns, expected " +
                     std::to_string(w.cols()));
  Matrix y = x * w.transpose();
  y.rowwise() += b.row(0);
  return y;
}

Matrix dense_backward(const ParamStore& params, const std::string& name, const Matrix& x, const Matrix& grad_out,
                      ParamStore& grads) {
  grads.at(name + ".W").noalias() += grad_out.transpose() * x;
  grads.at(name + ".b") += grad_out.colwise().sum();
  return grad_out * params.at(name + ".W");
}

// ---------------------------------------------------------------------------------
// MLP

void init_mlp(ParamStore& params, const MlpSpec& spec, Rng& rng, bool zero_last) {
  if (spec.widths.size() < 2) throw ConfigError(spec.name + ": an MLP needs at least two widths");
  for (Index l = 0; l < spec.layers(); ++l)
    init_dense(params, spec.layer(l), spec.widths[static_cast<std::size_t>(l)],
               spec.widths[static_cast<std::size_t>(l + 1)], rng, zero_last && l + 1 == spec.layers());
}

Matrix mlp_forward(const ParamStore& params, const MlpSpec& spec, const Matrix& input, MlpCache* cache) {
  if (input.cols() != spec.widths.front())
    throw ShapeError(spec.name + ": input width " + std::to_string(input.cols()) + " != " +
                     std::to_string(spec.widths.front()));
  if (cache) {
    cache->inputs.clear();
    cache->pre.clear();
  }
  Matrix x = input;
  for (Index l = 0; l < spec.layers(); ++l) {
    Matrix pre = dense_forward(params, spec.layer(l), x);
    const bool act = l + 1 < spec.layers() || spec.activate_output;
    Matrix next = act ? leaky_relu(pre) : pre;
    if (cache) {
      cache->inputs.push_back(std::move(x));
      cache->pre.push_back(std::move(pre));
    }
    x = std::move(next);
  }
  return x;
}

Matrix mlp_backward(const ParamStore& params, const MlpSpec& spec, const MlpCache& cache, const Matrix& grad_out,
                    ParamStore& grads) {
  if (static_cast<Index>(cache.inputs.size()) != spec.layers()) throw ShapeError(spec.name + ": empty cache");
  Matrix g = grad_out;
  for (Index l = spec.layers() - 1; l >= 0; --l) {
    const auto ul = static_cast<std::size_t>(l);
    const bool act = l + 1 < spec.layers() || spec.activate_output;
    if (act) g = leaky_relu_grad(cache.pre[ul], g);
    g = dense_backward(params, spec.layer(l), cache.inputs[ul], g, grads);
  }
  return g;
}

// ---------------------------------------------------------------------------------
// EdgeConv

void init_edgeconv(ParamStore& params, const EdgeConvSpec& spec, Rng& rng) {
  init_dense(params, spec.name, 2 * spec.in, spec.out, rng);
}

Matrix edgeconv_forward(const ParamStore& params, const EdgeConvSpec& spec, const Matrix& features,
                        const NeighborGraph& graph, EdgeConvCache* cache) {
  const Matrix& w = params.at(spec.name + ".W");
  const Matrix& b = params.at(spec.name + ".b");
  const Index rows = features.rows();
  const Index in = spec.in;
  const Index out = spec.out;
  if (features.cols() != in) throw ShapeError(spec.name + ": feature width mismatch");
  if (graph.k < 1) throw ShapeError(spec.name + ": empty neighbourhood");
  if (graph.rows() != rows) throw ShapeError(spec.name + ": graph does not match feature rows");

  const Matrix wa = w.leftCols(in);
  const Matrix wb = w.rightCols(in);
  Matrix a = features * (wa - wb).transpose();
  a.rowwise() += b.row(0);
  const RowMatrix bm = features * wb.transpose();

  Matrix pre(rows, out);
  std::vector<std::int32_t> arg(static_cast<std::size_t>(rows * out));
  Eigen::RowVectorXd best(out);
  Eigen::Matrix<std::int32_t, 1, Eigen::Dynamic> best_idx(out);
  for (Index i = 0; i < rows; ++i) {
    const Index* nb = graph.neighbors.data() + i * graph.k;
    best = bm.row(nb[0]);
    best_idx.setConstant(static_cast<std::int32_t>(nb[0]));
    for (Index e = 1; e < graph.k; ++e) {
      const Index j = nb[e];
      const double* row = bm.data() + j * out;
      for (Index c = 0; c < out; ++c) {
        if (row[c] > best(c)) {
          best(c) = row[c];
          best_idx(c) = static_cast<std::int32_t>(j);
        }
      }
    }
    pre.row(i) = a.row(i) + best;
    std::copy(best_idx.data(), best_idx.data() + out, arg.begin() + i * out);
  }
  Matrix y = leaky_relu(pre);
  if (cache) {
    cache->input = features;
    cache->pre = std::move(pre);
    cache->argmax = std::move(arg);
  }
  return y;
}

Matrix edgeconv_backward(const ParamStore& params, const EdgeConvSpec& spec, const EdgeConvCache& cache,
                         const Matrix& grad_out, ParamStore& grads) {
  const Matrix& w = params.at(spec.name + ".W");
  const Index rows = cache.input.rows();
  const Index in = spec.in;
  const Index out = spec.out;
  const Matrix ga = leaky_relu_grad(cache.pre, grad_out);
  RowMatrix gb = RowMatrix::Zero(rows, out);
  for (Index i = 0; i < rows; ++i) {
    const std::int32_t* arg = cache.argmax.data() + i * out;
    for (Index c = 0; c < out; ++c) gb(arg[c], c) += ga(i, c);
  }
  const Matrix gbm = gb;
  Matrix& gw = grads.at(spec.name + ".W");
  gw.leftCols(in).noalias() += ga.transpose() * cache.input;
  gw.rightCols(in).noalias() += (gbm - ga).transpose() * cache.input;
  grads.at(spec.name + ".b") += ga.colwise().sum();
  const Matrix wa = w.leftCols(in);
  const Matrix wb = w.rightCols(in);
  return ga * (wa - wb) + gbm * wb;
}

NeighborGraph block_knn_graph(const Matrix& features, Index block, Index k) {
  const Index rows = features.rows();
  if (block < 1 || rows % block != 0) throw ShapeError("block_knn_graph: rows not a multiple of block size");
  k = std::min(k, block);
  NeighborGraph graph;
  graph.k = k;
  graph.neighbors.resize(static_cast<std::size_t>(rows * k));
  std::vector<Index> order(static_cast<std::size_t>(block));
  Eigen::VectorXd dist(block);
  for (Index start = 0; start < rows; start += block) {
    const auto f = features.middleRows(start, block);
    const Matrix gram = f * f.transpose();
    const Eigen::VectorXd sq = gram.diagonal();
    for (Index i = 0; i < block; ++i) {
      for (Index j = 0; j < block; ++j) dist(j) = sq(i) + sq(j) - 2.0 * gram(i, j);
      dist(i) = -1.0;  // self first
      std::iota(order.begin(), order.end(), Index{0});
      std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](Index a, Index b) {
        return dist(a) < dist(b) || (dist(a) == dist(b) && a < b);
      });
      for (Index e = 0; e < k; ++e)
        graph.neighbors[static_cast<std::size_t>((start + i) * k + e)] = start + order[static_cast<std::size_t>(e)];
    }
  }
  return graph;
}

// ---------------------------------------------------------------------------------
// Pooling

SegmentMax segment_max(const Matrix& x, Index segment) {
  const Index rows = x.rows();
  const Index cols = x.cols();
  if (segment < 1 || rows % segment != 0) throw ShapeError("segment_max: rows not a multiple of segment size");
  const Index segments = rows / segment;
  SegmentMax out;
  out.values.resize(segments, cols);
  out.argmax.resize(static_cast<std::size_t>(segments * cols));
  for (Index s = 0; s < segments; ++s) {
    for (Index c = 0; c < cols; ++c) {
      Index best = s * segment;
      double v = x(best, c);
      for (Index r = best + 1; r < (s + 1) * segment; ++r) {
        if (x(r, c) > v) {
          v = x(r, c);
          best = r;
        }
      }
      out.values(s, c) = v;
      out.argmax[static_cast<std::size_t>(s * cols + c)] = static_cast<std::int32_t>(best);
    }
  }
  return out;
}

Matrix segment_max_backward(const SegmentMax& pooled, Index rows, const Matrix& grad) {
  const Index cols = pooled.values.cols();
  Matrix g = Matrix::Zero(rows, cols);
  for (Index s = 0; s < pooled.values.rows(); ++s)
    for (Index c = 0; c < cols; ++c) g(pooled.argmax[static_cast<std::size_t>(s * cols + c)], c) += grad(s, c);
  return g;
}

// ---------------------------------------------------------------------------------
// Descriptor

EdgeConvSpec DescriptorSpec::layer(std::size_t l) const {
  const Index in = l == 0 ? 3 : widths[l - 1];
  return {name + "." + std::to_string(l), in, widths[l]};
}

void init_descriptor(ParamStore& params, const DescriptorSpec& spec, Rng& rng) {
  if (spec.widths.empty()) throw ConfigError("descriptor needs at least one EdgeConv layer");
  for (std::size_t l = 0; l < spec.widths.size(); ++l) init_edgeconv(params, spec.layer(l), rng);
}

Matrix descriptor_forward(const ParamStore& params, const DescriptorSpec& spec, const Matrix& stacked,
                          Index patch_size, DescriptorCache* cache) {
  if (stacked.cols() != 3) throw ShapeError("descriptor input must have 3 columns");
  if (patch_size < 1 || stacked.rows() % patch_size != 0)
    throw ShapeError("descriptor input rows must be a multiple of the patch size");
  const std::size_t layers = spec.widths.size();
  const NeighborGraph coord_graph = block_knn_graph(stacked, patch_size, spec.edge_k);

  DescriptorCache local;
  DescriptorCache& c = cache ? *cache : local;
  c.patch_size = patch_size;
  c.graphs.assign(layers, NeighborGraph{});
  c.layers.assign(layers, EdgeConvCache{});

  Matrix h = stacked;
  for (std::size_t l = 0; l < layers; ++l) {
    const bool last = l + 1 == layers;
    c.graphs[l] = (last && layers > 1) ? block_knn_graph(h, patch_size, spec.edge_k) : coord_graph;
    h = edgeconv_forward(params, spec.layer(l), h, c.graphs[l], cache ? &c.layers[l] : nullptr);
  }
  c.pooled = segment_max(h, patch_size);
  return c.pooled.values;
}

Matrix descriptor_backward(const ParamStore& params, const DescriptorSpec& spec, const DescriptorCache& cache,
                           const Matrix& grad_descriptors, ParamStore& grads) {
  const std::size_t layers = spec.widths.size();
  const Index rows = cache.layers.front().input.rows();
  Matrix g = segment_max_backward(cache.pooled, rows, grad_descriptors);
  for (std::size_t l = layers; l-- > 0;) g = edgeconv_backward(params, spec.layer(l), cache.layers[l], g, grads);
  return g;
}

Vector patch_descriptor(const ParamStore& params, const DescriptorSpec& spec, const Points& patch_coords) {
  const Matrix stacked = patch_coords;
  return descriptor_forward(params, spec, stacked, stacked.rows()).row(0).transpose();
}

// ---------------------------------------------------------------------------------
// PointNet

void init_pointnet(ParamStore& params, const PointNetSpec& spec, Rng& rng) {
  if (spec.point_widths.back() != spec.head_widths.front())
    throw ConfigError("pointnet: pooled width must equal the head input width");
  init_mlp(params, spec.point_mlp(), rng);
  init_mlp(params, spec.head_mlp(), rng);
}

RowVector pointnet_encode(const ParamStore& params, const PointNetSpec& spec, const Points& cloud,
                          PointNetCache* cache) {
  if (cloud.rows() == 0) throw SizeError("pointnet_encode: empty cloud");
  const Matrix x = cloud;
  PointNetCache local;
  PointNetCache& c = cache ? *cache : local;
  const Matrix per_point = mlp_forward(params, spec.point_mlp(), x, cache ? &c.point : nullptr);
  c.pooled = segment_max(per_point, per_point.rows());
  c.rows = per_point.rows();
  const Matrix z = mlp_forward(params, spec.head_mlp(), c.pooled.values, cache ? &c.head : nullptr);
  return z.row(0);
}

void pointnet_backward(const ParamStore& params, const PointNetSpec& spec, const PointNetCache& cache,
                       const RowVector& grad_latent, ParamStore& grads) {
  const Matrix g_pooled = mlp_backward(params, spec.head_mlp(), cache.head, grad_latent, grads);
  const Matrix g_points = segment_max_backward(cache.pooled, cache.rows, g_pooled);
  mlp_backward(params, spec.point_mlp(), cache.point, g_points, grads);
}

// ---------------------------------------------------------------------------------
// Optimisation and gradient checking

void MomentumSgd::step(ParamStore& params, const ParamStore& grads) {
  if (velocity_.size() != params.size()) velocity_ = params.zeros_like();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix& g = grads.at(params.name(i));
    Matrix& v = velocity_.value(i);
    v = momentum_ * v + g;
    params.value(i) -= lr_ * v;
  }
  if (!params.all_finite()) throw TrainingError("parameters became non-finite after an optimizer step");
}

double clip_grad_norm(ParamStore& grads, double max_norm) {
  const double norm = std::sqrt(grads.squared_norm());
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (std::size_t i = 0; i < grads.size(); ++i) grads.value(i) *= scale;
  }
  return norm;
}

namespace {

double relative_error(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / scale;
}

}  // namespace

double grad_check(const Differentiable& op, const ParamStore& params, Index probes, Rng& rng, double h) {
  const ParamStore analytic = op.gradient(params);
  ParamStore work = params;
  const Index total = params.scalar_count();
  if (total == 0) return 0.0;
  std::uniform_int_distribution<Index> pick(0, total - 1);
  double worst = 0.0;
  for (Index p = 0; p < probes; ++p) {
    Index flat = pick(rng);
    std::size_t slot = 0;
    while (flat >= work.value(slot).size()) flat -= work.value(slot++).size();
    double& entry = work.value(slot)(flat);
    const double saved = entry;
    entry = saved + h;
    const double up = op.loss(work);
    entry = saved - h;
    const double down = op.loss(work);
    entry = saved;
    const double numeric = (up - down) / (2.0 * h);
    worst = std::max(worst, relative_error(analytic.value(slot)(flat), numeric));
  }
  return worst;
}

double grad_check_input(const std::function<double(const Matrix&)>& loss, const Matrix& input,
                        const Matrix& analytic, Index probes, Rng& rng, double h) {
  if (input.size() == 0) return 0.0;
  Matrix work = input;
  std::uniform_int_distribution<Index> pick(0, input.size() - 1);
  double worst = 0.0;
  for (Index p = 0; p < probes; ++p) {
    const Index flat = pick(rng);
    const double saved = work(flat);
    work(flat) = saved + h;
    const double up = loss(work);
    work(flat) = saved - h;
    const double down = loss(work);
    work(flat) = saved;
    worst = std::max(worst, relative_error(analytic(flat), (up - down) / (2.0 * h)));
  }
  return worst;
}

}  // namespace pccforge
