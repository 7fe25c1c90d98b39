#include <doctest.h>

#include <cmath>
#include <set>

#include "oracles.hpp"
#include "pccforge/metrics.hpp"
#include "support.hpp"

using namespace pccforge;
using namespace support;

namespace {

bool bitwise_row_in(const Points& cloud, const Eigen::Ref<const RowVector>& row) {
  for (Index i = 0; i < cloud.rows(); ++i)
    if (cloud(i, 0) == row(0) && cloud(i, 1) == row(1) && cloud(i, 2) == row(2)) return true;
  return false;
}

Patch flat_patch(Rng& rng, Index k) {
  Points local = uniform_cloud(k, rng);
  local.col(2) *= 0.01;
  local.rowwise() -= local.colwise().mean();
  Patch p;
  p.local_coords = local;
  p.normal = estimate_normal(local);
  return p;
}

}  // namespace

TEST_CASE("mixed_sample examples") {
  Rng rng(1);
  const Points partial = uniform_cloud(30, rng);
  const auto all = mixed_sample(partial, Points(0, 3), 30);
  CHECK(all.frozen_count() == 30);
  std::set<Index> sources(all.source_index.begin(), all.source_index.end());
  CHECK(sources.size() == 30);
  for (Index i = 0; i < 30; ++i)
    CHECK(all.points.row(i) == partial.row(all.source_index[static_cast<std::size_t>(i)]));

  const auto none = mixed_sample(Points(0, 3), uniform_cloud(40, rng), 20);
  CHECK(none.frozen_count() == 0);
  CHECK(none.size() == 20);

  const Points big_partial = uniform_cloud(1024, rng), coarse = uniform_cloud(2048, rng, 1.2);
  const auto mixed = mixed_sample(big_partial, coarse, 2048);
  CHECK(mixed.size() == 2048);
  CHECK(mixed.frozen_count() > 0);
  for (Index i = 0; i < mixed.size(); ++i) {
    if (!mixed.frozen[static_cast<std::size_t>(i)]) continue;
    REQUIRE(bitwise_row_in(big_partial, mixed.points.row(i)));
    REQUIRE(mixed.points.row(i) == big_partial.row(mixed.source_index[static_cast<std::size_t>(i)]));
  }
  CHECK_THROWS_AS(mixed_sample(partial, Points(0, 3), 31), SizeError);
  CHECK_THROWS_AS(mixed_sample(partial, Points(0, 3), 0), SizeError);
}

TEST_CASE("sampling switches") {
  Rng rng(2);
  const Points partial = uniform_cloud(50, rng), coarse = uniform_cloud(70, rng);
  CrefSpec spec = small_cref_spec();
  spec.refine_points = 60;
  const auto base = sample_for_refinement(spec, partial, coarse);
  CHECK(base.frozen_count() > 0);
  spec.mixed_sampling = false;
  const auto coarse_only = sample_for_refinement(spec, partial, coarse);
  CHECK(coarse_only.frozen_count() == 0);
  for (Index i = 0; i < coarse_only.size(); ++i) CHECK(bitwise_row_in(coarse, coarse_only.points.row(i)));
  spec.mixed_sampling = true;
  spec.freezing = false;
  const auto unfrozen = sample_for_refinement(spec, partial, coarse);
  CHECK(unfrozen.frozen_count() == 0);
  CHECK(unfrozen.points == base.points);
}

TEST_CASE("euclidean and feature similarity examples") {
  Rng rng(3);
  const Points p = uniform_cloud(5, rng);
  const Vector e = euclidean_similarity(p.row(0).transpose(), p);
  CHECK(e(0) == 0.0);
  const Points unit = (Points(1, 3) << 1, 0, 0).finished();
  CHECK(euclidean_similarity(Vec3::Zero(), unit)(0) == 1.0);
  const Vec3 q(0.2, -0.3, 0.5);
  const Points qp = q.transpose();
  const Vector row = euclidean_similarity(q, p);
  for (Index i = 0; i < 5; ++i) CHECK(std::abs(row(i) - oracle::sq(qp, 0, p, i)) <= 1e-15 * row(i));

  Matrix fp(4, 3);
  fp << 1, 2, 3,  //
      -1, -2, -3,  //
      3, 0, -1,    //
      0, 0, 0;
  const RowVector fq = (RowVector(3) << 1, 2, 3).finished();
  const Vector f = feature_similarity(fq, fp);
  CHECK(f(0) == doctest::Approx(1.0));
  CHECK(f(1) == doctest::Approx(-1.0));
  CHECK(f(2) == doctest::Approx(0.0));
  CHECK(f(3) == 0.0);
}

TEST_CASE("combine_similarity examples and scalar oracle") {
  Matrix w1(1, 2), w2(1, 2);
  w1 << 0.0, 1e6;
  w2 << 1.0, 0.0;
  const Matrix w = combine_similarity(w1, w2);
  CHECK(w(0, 0) == doctest::Approx(1.0 + std::exp(1.0)));
  CHECK(w(0, 0) == doctest::Approx(3.71828).epsilon(1e-6));
  CHECK(w(0, 1) == 1.0);

  Rng rng(4);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Matrix a(3, 4), b(3, 4);
  for (Index i = 0; i < 3; ++i)
    for (Index j = 0; j < 4; ++j) {
      a(i, j) = 2.0 + 2.0 * u(rng);
      b(i, j) = u(rng);
    }
  const Matrix sum = combine_similarity(a, b, SimilarityMode::Sum);
  const Matrix prod = combine_similarity(a, b, SimilarityMode::Product);
  const Matrix eu = combine_similarity(a, b, SimilarityMode::EuclideanOnly);
  const Matrix fe = combine_similarity(a, b, SimilarityMode::FeatureOnly);
  for (Index i = 0; i < 3; ++i)
    for (Index j = 0; j < 4; ++j) {
      const double s = std::exp(-a(i, j)) + std::exp(b(i, j));
      CHECK(std::abs(sum(i, j) - s) <= 1e-15 * s);
      CHECK(std::abs(prod(i, j) - std::exp(-a(i, j)) * std::exp(b(i, j))) <= 1e-15 * prod(i, j));
      CHECK(std::abs(eu(i, j) - std::exp(-a(i, j))) <= 1e-15 * eu(i, j));
      CHECK(std::abs(fe(i, j) - std::exp(b(i, j))) <= 1e-15 * fe(i, j));
      CHECK(sum(i, j) > 0.0);
    }
  CHECK_THROWS_AS(combine_similarity(a, Matrix::Zero(3, 3)), ShapeError);
}

TEST_CASE("top-k selection and monotone invariance") {
  const RowVector flat = RowVector::Constant(6, 2.5);
  CHECK(topk_indices(flat, 3) == std::vector<Index>{0, 1, 2});
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    RowVector row(30);
    for (Index i = 0; i < 30; ++i) row(i) = std::uniform_real_distribution<double>(0.1, 3.0)(rng);
    const auto base = topk_indices(row, 8);
    const RowVector mapped = (row.array().exp() * 3.0 + 1.0).matrix();
    CHECK(topk_indices(mapped, 8) == base);
    const RowVector cubed = row.array().cube().matrix();
    CHECK(topk_indices(cubed, 8) == base);
  }
  CHECK_THROWS_AS(topk_indices(flat, 0), SizeError);
  CHECK_THROWS_AS(topk_indices(flat, 7), SizeError);
}

TEST_CASE("aggregate_topk matches a sort-based oracle") {
  Rng rng(6);
  Matrix w(4, 3);
  w << 3, 1, 2,  //
      1, 1, 1,   //
      0.5, 2, 2, //
      9, 8, 10;
  const Matrix fp = uniform_cloud(3, rng);
  const Matrix fq = uniform_cloud(4, rng);
  for (Index k = 1; k <= 3; ++k) {
    const Aggregation agg = aggregate_topk(w, fp, fq, k);
    for (Index j = 0; j < 4; ++j) {
      std::vector<Index> order{0, 1, 2};
      std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return w(j, a) > w(j, b); });
      RowVector mx = RowVector::Constant(3, -1e300), mean = RowVector::Zero(3);
      for (Index s = 0; s < k; ++s) {
        const Index c = order[static_cast<std::size_t>(s)];
        CHECK(agg.selected[static_cast<std::size_t>(j * k + s)] == c);
        mx = mx.cwiseMax(fp.row(c));
        mean += fp.row(c);
      }
      mean /= static_cast<double>(k);
      CHECK(agg.fused.block(j, 0, 1, 3) == fq.row(j));
      CHECK(agg.fused.block(j, 3, 1, 3) == mx);
      CHECK((agg.fused.block(j, 6, 1, 3) - mean).cwiseAbs().maxCoeff() < 1e-15);
      if (k == 1) CHECK(agg.fused.block(j, 3, 1, 3) == agg.fused.block(j, 6, 1, 3));
    }
  }
  CHECK_THROWS_AS(aggregate_topk(w, fp, fq, 4), SizeError);
}

TEST_CASE("similarity heatmap normalisation") {
  Matrix w(2, 5);
  w << 1, 3, 2, 5, 4,  //
      2, 2, 2, 2, 2;
  const Vector h = similarity_heatmap(w, 0);
  CHECK(h.minCoeff() == 0.0);
  CHECK(h.maxCoeff() == 1.0);
  Index arg_w, arg_h;
  w.row(0).maxCoeff(&arg_w);
  h.maxCoeff(&arg_h);
  CHECK(arg_w == arg_h);
  CHECK(similarity_heatmap(w, 1) == Vector::Zero(5));
  CHECK_THROWS_AS(similarity_heatmap(w, 2), SizeError);
}

TEST_CASE("zero-output angle networks only reflect x") {
  Rng rng(7);
  CrefSpec spec = small_cref_spec();
  ParamStore params;
  init_cref(params, spec, rng);
  Patch p;
  p.local_coords = uniform_cloud(spec.patch_size, rng);
  p.local_coords.rowwise() -= p.local_coords.colwise().mean();
  p.normal = Vec3::UnitZ();
  const CanonicalPatch c = canonicalize_patch(p, params, spec);
  Points expected = p.local_coords;
  expected.col(0) *= -1.0;
  CHECK((c.coords - expected).cwiseAbs().maxCoeff() < 1e-15);
  CHECK(c.frame.r1 == Mat3::Identity());
  CHECK(c.frame.r2 == Mat3::Identity());
  CHECK(c.frame.psi == 0.0);
}

TEST_CASE("canonical patches have a vertical PCA normal") {
  Rng rng(8);
  CrefSpec spec = small_cref_spec();
  spec.patch_size = 24;
  ParamStore params;
  init_cref(params, spec, rng);
  randomize_cref(params, spec, rng);
  for (int trial = 0; trial < 20; ++trial) {
    Patch p = flat_patch(rng, spec.patch_size);
    const Mat3 r = axis_angle_matrix<double>(Vec3::Random().normalized(), 2.0 * trial);
    p.local_coords = p.local_coords * r.transpose();
    p.normal = estimate_normal(p.local_coords);
    const CanonicalPatch c = canonicalize_patch(p, params, spec);
    const Vec3 n = estimate_normal(c.coords);
    CHECK(std::abs(std::abs(n.z()) - 1.0) < 1e-5);
  }
}

TEST_CASE("rotated copies canonicalise identically for matching angle inputs") {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    Patch p = flat_patch(rng, 16);
    const Mat3 r = axis_angle_matrix<double>(Vec3::Random().normalized(), 0.3 + trial);
    Patch q = p;
    q.local_coords = p.local_coords * r.transpose();
    q.normal = r * p.normal;
    // r1(q) r r1(p)^T fixes e_z, so it is a rotation about e_z by some delta.
    const Mat3 rz = rotation_to_z(q.normal) * r * rotation_to_z(p.normal).transpose();
    const double delta = std::atan2(rz(1, 0), rz(0, 0));
    const double phi = 0.7, psi = -0.4;
    const CanonicalPatch a = canonicalize_with_angles(p, phi, psi);
    const CanonicalPatch b = canonicalize_with_angles(q, phi - delta, psi);
    CHECK((a.coords - b.coords).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("canonicalize_with_angles agrees with the network path") {
  Rng rng(10);
  CrefSpec spec = small_cref_spec();
  ParamStore params;
  init_cref(params, spec, rng);
  randomize_cref(params, spec, rng);
  Patch p = flat_patch(rng, spec.patch_size);
  const CanonicalPatch net = canonicalize_patch(p, params, spec);
  const double phi = std::atan2(net.frame.r2(1, 0), net.frame.r2(0, 0));
  const CanonicalPatch direct = canonicalize_with_angles(p, phi, net.frame.psi);
  CHECK((net.coords - direct.coords).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(is_rotation(net.frame.r1));
  CHECK(is_rotation(net.frame.r2));
}

TEST_CASE("untrained refiner returns the mixed sample and keeps frozen points") {
  Rng rng(11);
  const CrefSpec spec = small_cref_spec();
  ParamStore params;
  init_cref(params, spec, rng);
  const CrefSample s = small_cref_sample(rng);
  const RefineResult r = refine(params, spec, s.partial, s.coarse);
  const SampledCloud sampled = mixed_sample(s.partial, s.coarse, spec.refine_points, spec.fps_start);
  CHECK(r.output == sampled.points);
  CHECK(r.output.rows() == spec.refine_points);
  CHECK(r.similarity.minCoeff() > 0.0);
  CHECK(r.similarity.allFinite());
}

TEST_CASE("trained-like refiner moves only adjustable points") {
  Rng rng(12);
  const CrefSpec spec = small_cref_spec();
  ParamStore params;
  init_cref(params, spec, rng);
  randomize_cref(params, spec, rng);
  for (int trial = 0; trial < 5; ++trial) {
    const CrefSample s = small_cref_sample(rng);
    const RefineResult r = refine(params, spec, s.partial, s.coarse);
    Index moved = 0;
    for (Index i = 0; i < r.output.rows(); ++i) {
      if (r.sampled.frozen[static_cast<std::size_t>(i)]) {
        CHECK(r.output.row(i) == s.partial.row(r.sampled.source_index[static_cast<std::size_t>(i)]));
      } else if (r.output.row(i) != r.sampled.points.row(i)) {
        ++moved;
      }
    }
    CHECK(moved > 0);
    // Every frozen partial point is reproduced, so its distance to the output is zero.
    Points frozen(r.sampled.frozen_count(), 3);
    Index f = 0;
    for (Index i = 0; i < r.output.rows(); ++i)
      if (r.sampled.frozen[static_cast<std::size_t>(i)]) frozen.row(f++) = r.sampled.points.row(i);
    CHECK(uhd(frozen, r.output) == 0.0);
    // The displacement round trip through each frame.
    for (std::size_t j = 0; j < r.frames.size(); ++j) {
      const Vec3 o = r.offsets.row(static_cast<Index>(j)).transpose();
      CHECK((invert_frame(forward_rotate(o, r.frames[j]), r.frames[j]) - o).cwiseAbs().maxCoeff() < 1e-9);
    }
  }
}

TEST_CASE("permuting the partial cloud permutes similarity columns and keeps the output") {
  Rng rng(13);
  const CrefSpec spec = small_cref_spec();
  ParamStore params;
  init_cref(params, spec, rng);
  randomize_cref(params, spec, rng);
  const CrefSample s = small_cref_sample(rng);
  const SampledCloud sampled = mixed_sample(s.partial, s.coarse, spec.refine_points);
  const auto rows = sampled.adjustable();
  const auto perm = random_permutation(s.partial.rows(), rng);
  const Points shuffled = rows_of(s.partial, perm);
  const RefineResult a = refine_sampled(params, spec, s.partial, sampled, rows);
  const RefineResult b = refine_sampled(params, spec, shuffled, sampled, rows);
  for (Index j = 0; j < a.similarity.rows(); ++j)
    for (Index c = 0; c < b.similarity.cols(); ++c)
      CHECK(std::abs(b.similarity(j, c) - a.similarity(j, perm[static_cast<std::size_t>(c)])) < 1e-12);
  CHECK((a.output - b.output).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("refiner gradients match central differences") {
  Rng rng(14);
  const CrefSpec spec = small_cref_spec();
  ParamStore params;
  init_cref(params, spec, rng);
  randomize_cref(params, spec, rng);
  const CrefSample s = small_cref_sample(rng);
  const Differentiable full = cref_objective(spec, s, 0);
  for (const char* prefix : {"ang.", "disp.", "desc."}) {
    ParamStore subset;
    const Differentiable op = restricted(full, params, prefix, subset);
    const double err = grad_check(op, subset, 50, rng);
    MESSAGE(std::string(prefix) << " max relative error " << err);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("initial loss equals the chamfer distance of the mixed sample") {
  Rng rng(15);
  const CrefSpec spec = small_cref_spec();
  ParamStore params;
  init_cref(params, spec, rng);
  const CrefSample s = small_cref_sample(rng);
  Rng r(1);
  const double loss = cref_loss(params, spec, s, 0, r, nullptr);
  const SampledCloud sampled = mixed_sample(s.partial, s.coarse, spec.refine_points);
  CHECK(loss == chamfer_l2(sampled.points, s.truth));
}

TEST_CASE("refiner training with zero learning rate changes nothing") {
  Rng rng(16);
  const CrefSpec spec = small_cref_spec();
  ParamStore params;
  init_cref(params, spec, rng);
  const std::vector<CrefSample> data{small_cref_sample(rng)};
  CrefTrainOptions opt;
  opt.epochs = 2;
  opt.learning_rate = 0.0;
  const ParamStore out = train_cref(data, spec, params, opt);
  for (std::size_t i = 0; i < params.size(); ++i) CHECK(out.value(i) == params.value(i));
}

TEST_CASE("single-sample refiner overfit decreases the loss") {
  Rng rng(17);
  const CrefSpec spec = small_cref_spec();
  ParamStore params;
  init_cref(params, spec, rng);
  const std::vector<CrefSample> data{small_cref_sample(rng)};
  std::vector<double> trace;
  CrefTrainOptions opt;
  opt.epochs = 200;
  opt.learning_rate = 0.01;
  opt.on_step = [&](Index, double loss) { trace.push_back(loss); };
  train_cref(data, spec, params, opt);
  REQUIRE(trace.size() == 200);
  std::vector<double> window;
  for (std::size_t w = 0; w < 4; ++w) {
    double sum = 0.0;
    for (std::size_t i = w * 50; i < (w + 1) * 50; ++i) sum += trace[i];
    window.push_back(sum / 50.0);
  }
  MESSAGE("window means " << window[0] << " " << window[1] << " " << window[2] << " " << window[3]);
  for (std::size_t w = 1; w < window.size(); ++w) CHECK(window[w] < window[w - 1]);
}
