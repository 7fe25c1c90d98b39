#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "pccforge/nn.hpp"

using namespace pccforge;

namespace {

Matrix uniform(Index r, Index c, Rng& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  Matrix m(r, c);
  for (Index i = 0; i < r; ++i)
    for (Index j = 0; j < c; ++j) m(i, j) = u(rng);
  return m;
}

/// Loss = sum(out .* weights) so every output entry gets a distinct upstream gradient.
struct Probe {
  Matrix weights;
  double operator()(const Matrix& out) const { return (out.array() * weights.array()).sum(); }
};

double lrelu(double v) { return v > 0 ? v : 0.2 * v; }

}  // namespace

TEST_CASE("mlp with zero parameters outputs zeros") {
  Rng rng(1);
  ParamStore p;
  const MlpSpec spec{"m", {4, 8, 3}, false};
  init_mlp(p, spec, rng);
  for (std::size_t i = 0; i < p.size(); ++i) p.value(i).setZero();
  CHECK(mlp_forward(p, spec, uniform(5, 4, rng)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("identity single layer passes input through") {
  Rng rng(1);
  ParamStore p;
  const MlpSpec spec{"id", {3, 3}, false};
  init_mlp(p, spec, rng);
  p.at("id.0.W") = Matrix::Identity(3, 3);
  p.at("id.0.b").setZero();
  const Matrix x = uniform(6, 3, rng);
  CHECK(mlp_forward(p, spec, x) == x);
}

TEST_CASE("mlp forward matches a scalar-loop reimplementation") {
  Rng rng(2);
  ParamStore p;
  const MlpSpec spec{"m", {5, 7, 4}, false};
  init_mlp(p, spec, rng);
  const Matrix x = uniform(9, 5, rng);
  const Matrix y = mlp_forward(p, spec, x);
  const Matrix& w0 = p.at("m.0.W");
  const Matrix& b0 = p.at("m.0.b");
  const Matrix& w1 = p.at("m.1.W");
  const Matrix& b1 = p.at("m.1.b");
  for (Index r = 0; r < 9; ++r) {
    std::vector<double> h(7);
    for (Index j = 0; j < 7; ++j) {
      double s = b0(0, j);
      for (Index i = 0; i < 5; ++i) s += w0(j, i) * x(r, i);
      h[static_cast<std::size_t>(j)] = lrelu(s);
    }
    for (Index k = 0; k < 4; ++k) {
      double s = b1(0, k);
      for (Index j = 0; j < 7; ++j) s += w1(k, j) * h[static_cast<std::size_t>(j)];
      CHECK(std::abs(y(r, k) - s) < 1e-12);
    }
  }
}

TEST_CASE("mlp rejects mismatched input widths") {
  Rng rng(2);
  ParamStore p;
  const MlpSpec spec{"m", {5, 3}, false};
  init_mlp(p, spec, rng);
  CHECK_THROWS_AS(mlp_forward(p, spec, uniform(2, 4, rng)), ShapeError);
}

TEST_CASE("linear layer gradient is g x^T") {
  Rng rng(3);
  ParamStore p;
  const MlpSpec spec{"lin", {4, 2}, false};
  init_mlp(p, spec, rng);
  const Matrix x = uniform(1, 4, rng);
  const Matrix g = uniform(1, 2, rng);
  MlpCache cache;
  mlp_forward(p, spec, x, &cache);
  ParamStore grads = p.zeros_like();
  const Matrix gx = mlp_backward(p, spec, cache, g, grads);
  CHECK((grads.at("lin.0.W") - g.transpose() * x).cwiseAbs().maxCoeff() < 1e-15);
  CHECK((grads.at("lin.0.b") - g).cwiseAbs().maxCoeff() < 1e-15);
  CHECK((gx - g * p.at("lin.0.W")).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("zero upstream gradient gives zero gradients") {
  Rng rng(3);
  ParamStore p;
  const MlpSpec spec{"m", {3, 6, 2}, true};
  init_mlp(p, spec, rng);
  MlpCache cache;
  mlp_forward(p, spec, uniform(4, 3, rng), &cache);
  ParamStore grads = p.zeros_like();
  const Matrix gx = mlp_backward(p, spec, cache, Matrix::Zero(4, 2), grads);
  CHECK(grads.squared_norm() == 0.0);
  CHECK(gx.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("mlp gradients match central differences") {
  Rng rng(4);
  ParamStore p;
  const MlpSpec spec{"m", {3, 16, 8, 2}, false};
  init_mlp(p, spec, rng);
  const Matrix x = uniform(10, 3, rng);
  const Probe probe{uniform(10, 2, rng)};
  Differentiable op;
  op.loss = [&](const ParamStore& q) { return probe(mlp_forward(q, spec, x)); };
  op.gradient = [&](const ParamStore& q) {
    MlpCache cache;
    mlp_forward(q, spec, x, &cache);
    ParamStore g = q.zeros_like();
    mlp_backward(q, spec, cache, probe.weights, g);
    return g;
  };
  CHECK(grad_check(op, p, 80, rng) < 1e-4);

  MlpCache cache;
  mlp_forward(p, spec, x, &cache);
  ParamStore g = p.zeros_like();
  const Matrix gx = mlp_backward(p, spec, cache, probe.weights, g);
  CHECK(grad_check_input([&](const Matrix& in) { return probe(mlp_forward(p, spec, in)); }, x, gx, 30, rng) < 1e-4);
}

TEST_CASE("grad_check on a linear layer and a constant function") {
  Rng rng(5);
  ParamStore p;
  init_dense(p, "lin", 6, 3, rng);
  const Matrix x = uniform(4, 6, rng);
  const Probe probe{uniform(4, 3, rng)};
  Differentiable linear;
  linear.loss = [&](const ParamStore& q) { return probe(dense_forward(q, "lin", x)); };
  linear.gradient = [&](const ParamStore& q) {
    ParamStore g = q.zeros_like();
    dense_backward(q, "lin", x, probe.weights, g);
    return g;
  };
  CHECK(grad_check(linear, p, 50, rng) < 1e-7);

  Differentiable constant;
  constant.loss = [](const ParamStore&) { return 3.0; };
  constant.gradient = [](const ParamStore& q) { return q.zeros_like(); };
  CHECK(grad_check(constant, p, 50, rng) == 0.0);
}

TEST_CASE("edgeconv with identical features is constant across points") {
  Rng rng(6);
  ParamStore p;
  const EdgeConvSpec spec{"ec", 4, 5};
  init_edgeconv(p, spec, rng);
  Matrix f(6, 4);
  f.rowwise() = uniform(1, 4, rng).row(0);
  NeighborGraph g{3, {}};
  for (Index i = 0; i < 6; ++i)
    for (Index j = 0; j < 3; ++j) g.neighbors.push_back((i + j) % 6);
  const Matrix out = edgeconv_forward(p, spec, f, g);
  for (Index i = 1; i < 6; ++i) CHECK(out.row(i) == out.row(0));
}

TEST_CASE("edgeconv with one neighbour reduces to that edge") {
  Rng rng(7);
  ParamStore p;
  const EdgeConvSpec spec{"ec", 3, 4};
  init_edgeconv(p, spec, rng);
  const Matrix f = uniform(4, 3, rng);
  const NeighborGraph g{1, {2, 3, 0, 1}};
  const Matrix out = edgeconv_forward(p, spec, f, g);
  for (Index i = 0; i < 4; ++i) {
    Matrix edge(1, 6);
    edge << f.row(i), f.row(g.neighbors[static_cast<std::size_t>(i)]) - f.row(i);
    const Matrix expected = leaky_relu((edge * p.at("ec.W").transpose()) + p.at("ec.b"));
    CHECK((out.row(i) - expected).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("edgeconv matches exhaustive enumeration on a 4-point graph") {
  Rng rng(8);
  ParamStore p;
  const EdgeConvSpec spec{"ec", 2, 3};
  init_edgeconv(p, spec, rng);
  const Matrix f = uniform(4, 2, rng);
  const NeighborGraph g{3, {0, 1, 2, 1, 3, 0, 2, 0, 3, 3, 2, 1}};
  const Matrix out = edgeconv_forward(p, spec, f, g);
  const Matrix& w = p.at("ec.W");
  const Matrix& b = p.at("ec.b");
  for (Index i = 0; i < 4; ++i)
    for (Index c = 0; c < 3; ++c) {
      double best = -1e300;
      for (Index e = 0; e < 3; ++e) {
        const Index j = g.neighbors[static_cast<std::size_t>(i * 3 + e)];
        double s = b(0, c);
        for (Index d = 0; d < 2; ++d) s += w(c, d) * f(i, d) + w(c, 2 + d) * (f(j, d) - f(i, d));
        best = std::max(best, lrelu(s));
      }
      CHECK(std::abs(out(i, c) - best) < 1e-12);
    }
}

TEST_CASE("edgeconv rejects an empty neighbourhood") {
  Rng rng(8);
  ParamStore p;
  const EdgeConvSpec spec{"ec", 2, 3};
  init_edgeconv(p, spec, rng);
  CHECK_THROWS_AS(edgeconv_forward(p, spec, uniform(4, 2, rng), NeighborGraph{0, {}}), ShapeError);
}

TEST_CASE("edgeconv gradients match central differences") {
  Rng rng(9);
  ParamStore p;
  const EdgeConvSpec spec{"ec", 3, 6};
  init_edgeconv(p, spec, rng);
  const Matrix f = uniform(12, 3, rng);
  const NeighborGraph g = block_knn_graph(f, 6, 4);
  const Probe probe{uniform(12, 6, rng)};
  Differentiable op;
  op.loss = [&](const ParamStore& q) { return probe(edgeconv_forward(q, spec, f, g)); };
  op.gradient = [&](const ParamStore& q) {
    EdgeConvCache cache;
    edgeconv_forward(q, spec, f, g, &cache);
    ParamStore grads = q.zeros_like();
    edgeconv_backward(q, spec, cache, probe.weights, grads);
    return grads;
  };
  CHECK(grad_check(op, p, 60, rng) < 1e-4);
}

TEST_CASE("descriptor is invariant to patch point order and duplicated patches") {
  Rng rng(10);
  ParamStore p;
  DescriptorSpec spec;
  spec.edge_k = 6;
  init_descriptor(p, spec, rng);
  const Matrix patch = uniform(16, 3, rng);
  std::vector<Index> perm(16);
  std::iota(perm.begin(), perm.end(), Index{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  Matrix shuffled(16, 3);
  for (Index i = 0; i < 16; ++i) shuffled.row(i) = patch.row(perm[static_cast<std::size_t>(i)]);
  const Vector a = patch_descriptor(p, spec, patch);
  const Vector b = patch_descriptor(p, spec, shuffled);
  CHECK(a.size() == 256);
  CHECK((a - b).cwiseAbs().maxCoeff() < 1e-12);

  Matrix twice(32, 3);
  twice << patch, patch;
  const Matrix both = descriptor_forward(p, spec, twice, 16);
  CHECK((both.row(0) - both.row(1)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((both.row(0).transpose() - a).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("descriptor network gradients match central differences") {
  Rng rng(11);
  ParamStore p;
  DescriptorSpec spec;
  spec.widths = {8, 8, 12, 16};
  spec.edge_k = 4;
  init_descriptor(p, spec, rng);
  const Matrix stacked = uniform(3 * 10, 3, rng);
  const Probe probe{uniform(3, 16, rng)};
  Differentiable op;
  op.loss = [&](const ParamStore& q) { return probe(descriptor_forward(q, spec, stacked, 10)); };
  op.gradient = [&](const ParamStore& q) {
    DescriptorCache cache;
    descriptor_forward(q, spec, stacked, 10, &cache);
    ParamStore g = q.zeros_like();
    descriptor_backward(q, spec, cache, probe.weights, g);
    return g;
  };
  CHECK(grad_check(op, p, 80, rng) < 1e-4);

  DescriptorCache cache;
  descriptor_forward(p, spec, stacked, 10, &cache);
  ParamStore g = p.zeros_like();
  const Matrix gx = descriptor_backward(p, spec, cache, probe.weights, g);
  CHECK(grad_check_input([&](const Matrix& in) { return probe(descriptor_forward(p, spec, in, 10)); }, stacked, gx,
                         50, rng) < 1e-4);
}

TEST_CASE("pointnet latent has 512 entries and is permutation invariant") {
  Rng rng(12);
  ParamStore p;
  PointNetSpec spec;
  init_pointnet(p, spec, rng);
  Points cloud = uniform(50, 3, rng);
  const RowVector z = pointnet_encode(p, spec, cloud);
  CHECK(z.size() == 512);

  Points shuffled = cloud;
  std::vector<Index> perm(50);
  std::iota(perm.begin(), perm.end(), Index{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  for (Index i = 0; i < 50; ++i) shuffled.row(i) = cloud.row(perm[static_cast<std::size_t>(i)]);
  CHECK((pointnet_encode(p, spec, shuffled) - z).cwiseAbs().maxCoeff() < 1e-12);

  Points doubled(100, 3);
  doubled << cloud, cloud;
  CHECK((pointnet_encode(p, spec, doubled) - z).cwiseAbs().maxCoeff() < 1e-12);
  CHECK_THROWS_AS(pointnet_encode(p, spec, Points(0, 3)), SizeError);
}

TEST_CASE("pointnet gradients match central differences") {
  Rng rng(13);
  ParamStore p;
  PointNetSpec spec;
  spec.point_widths = {3, 8, 16};
  spec.head_widths = {16, 12};
  init_pointnet(p, spec, rng);
  const Points cloud = uniform(20, 3, rng);
  const Probe probe{uniform(1, 12, rng)};
  Differentiable op;
  op.loss = [&](const ParamStore& q) { return probe(pointnet_encode(q, spec, cloud)); };
  op.gradient = [&](const ParamStore& q) {
    PointNetCache cache;
    pointnet_encode(q, spec, cloud, &cache);
    ParamStore g = q.zeros_like();
    pointnet_backward(q, spec, cache, probe.weights, g);
    return g;
  };
  CHECK(grad_check(op, p, 60, rng) < 1e-4);
}

TEST_CASE("forward passes are bitwise reproducible") {
  Rng rng(14);
  ParamStore p;
  DescriptorSpec spec;
  spec.edge_k = 5;
  init_descriptor(p, spec, rng);
  const Matrix stacked = uniform(40, 3, rng);
  CHECK(descriptor_forward(p, spec, stacked, 20) == descriptor_forward(p, spec, stacked, 20));
}

TEST_CASE("optimizer leaves parameters unchanged for zero gradients or zero learning rate") {
  Rng rng(15);
  ParamStore p;
  init_mlp(p, {"m", {3, 4, 2}, false}, rng);
  const ParamStore before = p;
  MomentumSgd sgd(0.1, 0.9);
  ParamStore zero = p.zeros_like();
  for (int i = 0; i < 3; ++i) sgd.step(p, zero);
  for (std::size_t i = 0; i < p.size(); ++i) CHECK(p.value(i) == before.value(i));

  ParamStore g = p.zeros_like();
  for (std::size_t i = 0; i < g.size(); ++i) g.value(i).setOnes();
  MomentumSgd frozen(0.0, 0.9);
  frozen.step(p, g);
  for (std::size_t i = 0; i < p.size(); ++i) CHECK(p.value(i) == before.value(i));
}

TEST_CASE("momentum update follows v <- mu v + g, p <- p - lr v") {
  ParamStore p;
  p.add("w", Matrix::Constant(1, 1, 1.0));
  ParamStore g = p.zeros_like();
  g.at("w")(0, 0) = 2.0;
  MomentumSgd sgd(0.1, 0.5);
  sgd.step(p, g);
  CHECK(p.at("w")(0, 0) == doctest::Approx(1.0 - 0.1 * 2.0));
  sgd.step(p, g);
  CHECK(p.at("w")(0, 0) == doctest::Approx(0.8 - 0.1 * 3.0));
}

TEST_CASE("clip_grad_norm rescales to the bound") {
  ParamStore g;
  g.add("a", Matrix::Constant(1, 2, 3.0));
  g.add("b", Matrix::Constant(1, 2, 4.0));
  const double before = clip_grad_norm(g, 1.0);
  CHECK(before == doctest::Approx(std::sqrt(50.0)));
  CHECK(std::sqrt(g.squared_norm()) == doctest::Approx(1.0));
}

TEST_CASE("parameter store bookkeeping") {
  ParamStore p;
  p.add("x", Matrix::Ones(2, 3));
  CHECK_THROWS_AS(p.add("x", Matrix::Ones(1, 1)), ConfigError);
  CHECK_THROWS_AS(p.at("missing"), ShapeError);
  CHECK(p.scalar_count() == 6);
  p.at("x")(0, 0) = std::nan("");
  CHECK_FALSE(p.all_finite());
}
