#include "pccforge/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace pccforge {

namespace fs = std::filesystem;

std::string to_string(ShapeFamily family) {
  switch (family) {
    case ShapeFamily::Ellipsoid: return "ellipsoid";
    case ShapeFamily::BoxAssembly: return "box-assembly";
    case ShapeFamily::WingedBody: return "winged-body";
    case ShapeFamily::LampLike: return "lamp-like";
  }
  return "ellipsoid";
}

ShapeFamily parse_family(const std::string& name) {
  if (name == "ellipsoid") return ShapeFamily::Ellipsoid;
  if (name == "box-assembly") return ShapeFamily::BoxAssembly;
  if (name == "winged-body") return ShapeFamily::WingedBody;
  if (name == "lamp-like") return ShapeFamily::LampLike;
  throw ConfigError("unknown shape family '" + name + "'");
}

// ---------------------------------------------------------------------------------
// Primitives

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kInsideMargin = 1e-9;

struct Primitive {
  enum Kind { Box, Ellipsoid, Cylinder, Frustum } kind;
  Vec3 center;
  Vec3 half;  // box half extents or ellipsoid semi-axes; cylinder/frustum: (r0, r1, half height)

  double area() const {
    switch (kind) {
      case Box: return 8.0 * (half.x() * half.y() + half.y() * half.z() + half.x() * half.z());
      case Ellipsoid: {
        // Knud Thomsen's approximation; only used to weight primitives.
        const double p = 1.6075;
        const double ab = std::pow(half.x() * half.y(), p);
        const double bc = std::pow(half.y() * half.z(), p);
        const double ac = std::pow(half.x() * half.z(), p);
        return 4.0 * kPi * std::pow((ab + bc + ac) / 3.0, 1.0 / p);
      }
      case Cylinder: return 2.0 * kPi * half.x() * 2.0 * half.z() + 2.0 * kPi * half.x() * half.x();
      case Frustum: {
        const double slant = std::hypot(half.y() - half.x(), 2.0 * half.z());
        return kPi * (half.x() + half.y()) * slant;
      }
    }
    return 0.0;
  }

  bool contains(const Vec3& p) const {
    const Vec3 d = p - center;
    switch (kind) {
      case Box:
        return std::abs(d.x()) < half.x() - kInsideMargin && std::abs(d.y()) < half.y() - kInsideMargin &&
               std::abs(d.z()) < half.z() - kInsideMargin;
      case Ellipsoid: return d.cwiseQuotient(half).squaredNorm() < 1.0 - kInsideMargin;
      case Cylinder:
        return std::hypot(d.x(), d.y()) < half.x() - kInsideMargin && std::abs(d.z()) < half.z() - kInsideMargin;
      case Frustum: return false;  // open surface
    }
    return false;
  }

  Vec3 sample(Rng& rng) const {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    switch (kind) {
      case Box: {
        const double axy = half.x() * half.y(), ayz = half.y() * half.z(), axz = half.x() * half.z();
        const double r = u(rng) * (axy + ayz + axz);
        const double sign = u(rng) < 0.5 ? -1.0 : 1.0;
        const double a = 2.0 * u(rng) - 1.0, b = 2.0 * u(rng) - 1.0;
        Vec3 local;
        if (r < axy)
          local = {a * half.x(), b * half.y(), sign * half.z()};
        else if (r < axy + ayz)
          local = {sign * half.x(), a * half.y(), b * half.z()};
        else
          local = {a * half.x(), sign * half.y(), b * half.z()};
        return center + local;
      }
      case Ellipsoid: {
        // Uniform sphere direction, accepted in proportion to the local area stretch.
        std::normal_distribution<double> normal(0.0, 1.0);
        const double limit = 1.0 / half.minCoeff();
        while (true) {
          Vec3 s(normal(rng), normal(rng), normal(rng));
          const double len = s.norm();
          if (len == 0.0) continue;
          s /= len;
          const double stretch = s.cwiseQuotient(half).norm();
          if (u(rng) * limit <= stretch) return center + s.cwiseProduct(half);
        }
      }
      case Cylinder: {
        const double r = half.x(), h = half.z();
        const double lateral = 2.0 * kPi * r * 2.0 * h;
        const double caps = 2.0 * kPi * r * r;
        const double theta = 2.0 * kPi * u(rng);
        if (u(rng) * (lateral + caps) < lateral)
          return center + Vec3(r * std::cos(theta), r * std::sin(theta), (2.0 * u(rng) - 1.0) * h);
        const double rr = r * std::sqrt(u(rng));
        const double z = u(rng) < 0.5 ? -h : h;
        return center + Vec3(rr * std::cos(theta), rr * std::sin(theta), z);
      }
      case Frustum: {
        const double r0 = half.x(), r1 = half.y(), h = half.z();
        const double rmax = std::max(r0, r1);
        while (true) {
          const double s = u(rng);
          const double r = r0 + (r1 - r0) * s;
          if (u(rng) * rmax > r) continue;
          const double theta = 2.0 * kPi * u(rng);
          return center + Vec3(r * std::cos(theta), r * std::sin(theta), -h + 2.0 * h * s);
        }
      }
    }
    return center;
  }
};

/// `signed_slots` lists parameters that are offsets and may take any finite value.
void require_count(const ShapeSpec& spec, std::size_t count, std::initializer_list<std::size_t> signed_slots = {}) {
  if (spec.parameters.size() != count)
    throw GeometryError(to_string(spec.family) + ": expected " + std::to_string(count) + " parameters, got " +
                        std::to_string(spec.parameters.size()));
  for (std::size_t i = 0; i < count; ++i) {
    const double v = spec.parameters[i];
    const bool may_be_signed = std::find(signed_slots.begin(), signed_slots.end(), i) != signed_slots.end();
    if (!std::isfinite(v) || (!may_be_signed && !(v > 0.0)))
      throw GeometryError(to_string(spec.family) + ": parameter " + std::to_string(i) + " must be finite" +
                          (may_be_signed ? "" : " and positive"));
  }
}

std::vector<Primitive> build_primitives(const ShapeSpec& spec) {
  const auto& p = spec.parameters;
  switch (spec.family) {
    case ShapeFamily::Ellipsoid:
      require_count(spec, 3);
      return {{Primitive::Ellipsoid, Vec3::Zero(), Vec3(p[0], p[1], p[2])}};
    case ShapeFamily::BoxAssembly: {
      // central box half extents, side box half extents, side offset
      require_count(spec, 9, {7, 8});
      const Vec3 side_half(p[3], p[4], p[5]);
      return {{Primitive::Box, Vec3::Zero(), Vec3(p[0], p[1], p[2])},
              {Primitive::Box, Vec3(p[6], p[7], p[8]), side_half},
              {Primitive::Box, Vec3(-p[6], p[7], p[8]), side_half}};
    }
    case ShapeFamily::WingedBody: {
      // fuselage radius, fuselage half length, wing half span, wing half chord, wing position,
      // fin height, tail half chord, stabiliser half span
      require_count(spec, 8, {4});
      const double thick = 0.03;
      const double tail_y = -0.85 * p[1];
      return {{Primitive::Ellipsoid, Vec3::Zero(), Vec3(p[0], p[1], p[0])},
              {Primitive::Box, Vec3(0.0, p[4], 0.0), Vec3(p[2], p[3], thick)},
              {Primitive::Box, Vec3(0.0, tail_y, 0.5 * p[5]), Vec3(thick, p[6], 0.5 * p[5])},
              {Primitive::Box, Vec3(0.0, tail_y, 0.0), Vec3(p[7], p[6], thick)}};
    }
    case ShapeFamily::LampLike: {
      // base radius, base half height, pole radius, pole half height, shade bottom radius,
      // shade top radius, shade half height
      require_count(spec, 7);
      const double base_z = -p[3] - p[1];
      const double shade_z = p[3];
      return {{Primitive::Cylinder, Vec3(0.0, 0.0, base_z), Vec3(p[0], p[0], p[1])},
              {Primitive::Cylinder, Vec3::Zero(), Vec3(p[2], p[2], p[3])},
              {Primitive::Frustum, Vec3(0.0, 0.0, shade_z), Vec3(p[4], p[5], p[6])}};
    }
  }
  throw GeometryError("unknown shape family");
}

}  // namespace

ShapeSpec random_shape_spec(ShapeFamily family, std::uint64_t seed) {
  Rng rng(seed);
  auto u = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  ShapeSpec spec;
  spec.family = family;
  spec.seed = seed;
  switch (family) {
    case ShapeFamily::Ellipsoid: spec.parameters = {u(0.4, 1.0), u(0.5, 1.2), u(0.3, 0.9)}; break;
    case ShapeFamily::BoxAssembly: {
      const double cx = u(0.15, 0.35);
      const double sx = u(0.1, 0.25);
      spec.parameters = {cx, u(0.3, 0.7), u(0.2, 0.5), sx, u(0.15, 0.4), u(0.1, 0.3),
                         cx + sx + u(-0.05, 0.15), u(-0.3, 0.3), u(-0.2, 0.3)};
      break;
    }
    case ShapeFamily::WingedBody:
      spec.parameters = {u(0.1, 0.2), u(0.8, 1.2), u(0.6, 1.1), u(0.12, 0.25), u(-0.1, 0.25),
                         u(0.2, 0.4), u(0.08, 0.14), u(0.2, 0.4)};
      break;
    case ShapeFamily::LampLike:
      spec.parameters = {u(0.25, 0.45), u(0.03, 0.08), u(0.03, 0.06), u(0.35, 0.6),
                         u(0.35, 0.6), u(0.12, 0.3), u(0.15, 0.3)};
      break;
  }
  return spec;
}

Points sample_surface(const ShapeSpec& spec, Index n) {
  if (n < 1) throw SizeError("sample_surface: point count must be positive");
  const auto prims = build_primitives(spec);
  std::vector<double> areas;
  for (const auto& p : prims) areas.push_back(p.area());
  std::discrete_distribution<std::size_t> pick(areas.begin(), areas.end());
  Rng rng(spec.seed ^ 0x9e3779b97f4a7c15ULL);

  auto draw = [&]() -> Vec3 {
    for (int attempt = 0; attempt < 100000; ++attempt) {
      const std::size_t i = pick(rng);
      const Vec3 p = prims[i].sample(rng);
      bool hidden = false;
      for (std::size_t j = 0; j < prims.size() && !hidden; ++j) hidden = j != i && prims[j].contains(p);
      if (!hidden) return p;
    }
    throw GeometryError("sample_surface: surface is fully enclosed");
  };

  Points out(n, 3);
  Index row = 0;
  while (row + 1 < n) {
    const Vec3 p = draw();
    out.row(row++) = p.transpose();
    out.row(row++) << -p.x(), p.y(), p.z();
  }
  if (row < n) out.row(row) = draw().transpose();
  return out;
}

Points normalize(const Points& cloud) {
  if (cloud.rows() == 0) throw SizeError("normalize: empty cloud");
  const Eigen::RowVector3d centroid = cloud.colwise().mean();
  Points centered = cloud.rowwise() - centroid;
  const double radius = centered.rowwise().norm().maxCoeff();
  if (!(radius > 0.0)) throw GeometryError("normalize: all points coincide");
  return centered / radius;
}

Points generate_shape(const ShapeSpec& spec, Index n) { return normalize(sample_surface(spec, n)); }

Points occlude(const Points& cloud, const Vec3& view, double fraction, Index size, Rng& rng) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("occlude: fraction must lie in (0, 1)");
  if (size < 1) throw SizeError("occlude: output size must be positive");
  const Index n = cloud.rows();
  const Index removed = std::max<Index>(1, std::llround(fraction * static_cast<double>(n)));
  if (removed >= n) throw SizeError("occlude: nothing left after occlusion");
  const Vec3 dir = view.normalized();
  const Eigen::VectorXd proj = cloud * dir;
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return proj(a) < proj(b); });
  order.resize(static_cast<std::size_t>(n - removed));

  std::vector<Index> chosen;
  if (static_cast<Index>(order.size()) >= size) {
    std::shuffle(order.begin(), order.end(), rng);
    chosen.assign(order.begin(), order.begin() + size);
  } else {
    chosen = order;
    std::uniform_int_distribution<std::size_t> pick(0, order.size() - 1);
    while (static_cast<Index>(chosen.size()) < size) chosen.push_back(order[pick(rng)]);
  }
  Points out(size, 3);
  for (Index i = 0; i < size; ++i) out.row(i) = cloud.row(chosen[static_cast<std::size_t>(i)]);
  return out;
}

// ---------------------------------------------------------------------------------
// Files

namespace {

std::vector<std::string_view> tokens(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    const std::size_t start = i;
    while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i > start) out.push_back(line.substr(start, i - start));
  }
  return out;
}

double parse_coordinate(std::string_view token, std::size_t line) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), v);
  if (ec != std::errc() || ptr != token.data() + token.size())
    throw ParseError("malformed number '" + std::string(token) + "'", line);
  if (!std::isfinite(v)) throw ParseError("non-finite coordinate", line);
  return v;
}

std::ifstream open_input(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return in;
}

std::FILE* open_output(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw IoError("cannot write " + path.string());
  return f;
}

void write_rows(std::FILE* f, const Points& cloud) {
  for (Index i = 0; i < cloud.rows(); ++i)
    std::fprintf(f, "%.17g %.17g %.17g\n", cloud(i, 0), cloud(i, 1), cloud(i, 2));
}

void close_output(std::FILE* f, const fs::path& path) {
  if (std::fclose(f) != 0) throw IoError("failed writing " + path.string());
}

std::string lower_extension(const fs::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext;
}

}  // namespace

Points read_xyz(const fs::path& path) {
  auto in = open_input(path);
  std::vector<double> values;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const auto t = tokens(line);
    if (t.empty()) continue;
    if (t.size() < 3) throw ParseError("expected three coordinates", number);
    for (int c = 0; c < 3; ++c) values.push_back(parse_coordinate(t[static_cast<std::size_t>(c)], number));
  }
  Points out(static_cast<Index>(values.size() / 3), 3);
  std::copy(values.begin(), values.end(), out.data());
  return out;
}

void write_xyz(const fs::path& path, const Points& cloud) {
  std::FILE* f = open_output(path);
  write_rows(f, cloud);
  close_output(f, path);
}

Points read_ply(const fs::path& path) {
  auto in = open_input(path);
  std::string line;
  std::size_t number = 0;
  auto next = [&]() -> bool {
    if (!std::getline(in, line)) return false;
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return true;
  };

  if (!next() || line != "ply") throw ParseError("missing 'ply' magic", std::max<std::size_t>(number, 1));
  struct Element {
    std::string name;
    Index count = 0;
    std::vector<std::string> properties;
    bool has_list = false;
  };
  std::vector<Element> elements;
  bool ascii = false;
  bool header_done = false;
  while (next()) {
    const auto t = tokens(line);
    if (t.empty() || t[0] == "comment" || t[0] == "obj_info") continue;
    if (t[0] == "format") {
      if (t.size() < 2) throw ParseError("malformed format line", number);
      if (t[1] != "ascii") throw FormatError("unsupported PLY encoding '" + std::string(t[1]) + "' in " + path.string());
      ascii = true;
    } else if (t[0] == "element") {
      if (t.size() != 3) throw ParseError("malformed element line", number);
      Element e;
      e.name = std::string(t[1]);
      long long count = 0;
      auto [ptr, ec] = std::from_chars(t[2].data(), t[2].data() + t[2].size(), count);
      if (ec != std::errc() || ptr != t[2].data() + t[2].size() || count < 0)
        throw ParseError("malformed element count", number);
      e.count = static_cast<Index>(count);
      elements.push_back(std::move(e));
    } else if (t[0] == "property") {
      if (elements.empty()) throw ParseError("property before any element", number);
      if (t.size() >= 2 && t[1] == "list") {
        elements.back().has_list = true;
        elements.back().properties.emplace_back(t.size() >= 5 ? std::string(t[4]) : "");
      } else if (t.size() == 3) {
        elements.back().properties.emplace_back(t[2]);
      } else {
        throw ParseError("malformed property line", number);
      }
    } else if (t[0] == "end_header") {
      header_done = true;
      break;
    } else {
      throw ParseError("unexpected header line '" + line + "'", number);
    }
  }
  if (!header_done) throw ParseError("missing end_header", number + 1);
  if (!ascii) throw FormatError("PLY file without a format line: " + path.string());

  Points out;
  bool found = false;
  for (const Element& e : elements) {
    if (e.name != "vertex") {
      for (Index i = 0; i < e.count; ++i)
        if (!next()) throw ParseError("file ends inside element '" + e.name + "'", number + 1);
      continue;
    }
    int cols[3] = {-1, -1, -1};
    for (std::size_t p = 0; p < e.properties.size(); ++p) {
      for (int c = 0; c < 3; ++c)
        if (e.properties[p] == std::string(1, static_cast<char>('x' + c))) cols[c] = static_cast<int>(p);
    }
    if (cols[0] < 0 || cols[1] < 0 || cols[2] < 0) throw FormatError("PLY vertex element lacks x, y, z");
    if (e.has_list) throw FormatError("list properties on vertices are not supported");
    out.resize(e.count, 3);
    for (Index i = 0; i < e.count; ++i) {
      if (!next()) throw ParseError("file ends after " + std::to_string(i) + " of " + std::to_string(e.count) +
                                        " vertices", number + 1);
      const auto t = tokens(line);
      if (t.size() < e.properties.size())
        throw ParseError("vertex line has " + std::to_string(t.size()) + " values, expected " +
                             std::to_string(e.properties.size()),
                         number);
      for (int c = 0; c < 3; ++c) out(i, c) = parse_coordinate(t[static_cast<std::size_t>(cols[c])], number);
    }
    found = true;
  }
  if (!found) throw FormatError("PLY file has no vertex element: " + path.string());
  return out;
}

void write_ply(const fs::path& path, const Points& cloud) {
  std::FILE* f = open_output(path);
  std::fprintf(f, "ply\nformat ascii 1.0\nelement vertex %lld\nproperty double x\nproperty double y\n"
                  "property double z\nend_header\n",
               static_cast<long long>(cloud.rows()));
  write_rows(f, cloud);
  close_output(f, path);
}

Points read_cloud(const fs::path& path) {
  const std::string ext = lower_extension(path);
  if (ext == ".xyz") return read_xyz(path);
  if (ext == ".ply") return read_ply(path);
  throw FormatError("unsupported point cloud format '" + ext + "': " + path.string());
}

void write_cloud(const fs::path& path, const Points& cloud) {
  const std::string ext = lower_extension(path);
  if (ext == ".xyz") return write_xyz(path, cloud);
  if (ext == ".ply") return write_ply(path, cloud);
  throw FormatError("unsupported point cloud format '" + ext + "': " + path.string());
}

// ---------------------------------------------------------------------------------
// Dataset

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<const SampleRecord*> Manifest::split(const std::string& name) const {
  std::vector<const SampleRecord*> out;
  for (const auto& r : records)
    if (r.split == name) out.push_back(&r);
  return out;
}

namespace {

/// splitmix64 finaliser.
std::uint64_t mix64(std::uint64_t x) {
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

const Vec3 kViews[6] = {Vec3::UnitX(), -Vec3::UnitX(), Vec3::UnitY(), -Vec3::UnitY(), Vec3::UnitZ(), -Vec3::UnitZ()};

/// Picks `count` points of a paired cloud pair by pair, always keeping the pair that
/// holds the farthest point so the result still reaches the unit sphere.
Points paired_subset(const Points& dense, Index count, Rng& rng) {
  const Index pairs = dense.rows() / 2;
  Index far = 0;
  dense.rowwise().squaredNorm().maxCoeff(&far);
  std::vector<Index> order(static_cast<std::size_t>(pairs));
  std::iota(order.begin(), order.end(), Index{0});
  std::shuffle(order.begin(), order.end(), rng);
  if (far / 2 < pairs) std::iter_swap(order.begin(), std::find(order.begin(), order.end(), far / 2));
  Points out(count, 3);
  Index row = 0;
  for (std::size_t k = 0; row < count; ++k) {
    out.row(row++) = dense.row(2 * order[k]);
    if (row < count) out.row(row++) = dense.row(2 * order[k] + 1);
  }
  return out;
}

}  // namespace

Manifest build_dataset(const RunConfig& config) {
  validate(config);
  if (config.complete_points > config.dense_points)
    throw ConfigError("config key 'complete_points' must not exceed dense_points");
  const fs::path root = config.dataset_dir;
  try {
    fs::create_directories(root / "clouds");
  } catch (const fs::filesystem_error& e) {
    throw IoError("cannot create dataset directory " + root.string() + ": " + e.what());
  }

  std::vector<std::string> instances;
  for (const auto& family : config.families)
    for (Index i = 0; i < config.instances_per_family; ++i) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "-%04lld", static_cast<long long>(i));
      instances.push_back(family + buf);
    }
  // 80/20 by hashed instance name, within each family.
  std::vector<std::string> train_set;
  for (std::size_t f = 0; f < config.families.size(); ++f) {
    const auto first = instances.begin() + static_cast<std::ptrdiff_t>(f * config.instances_per_family);
    std::vector<std::string> by_hash(first, first + config.instances_per_family);
    std::sort(by_hash.begin(), by_hash.end(), [](const std::string& a, const std::string& b) {
      const auto ha = mix64(fnv1a(a)), hb = mix64(fnv1a(b));
      return ha != hb ? ha < hb : a < b;
    });
    const Index total = static_cast<Index>(by_hash.size());
    Index train_count = static_cast<Index>(std::floor(config.train_fraction * static_cast<double>(total) + 1e-9));
    if (total >= 2) train_count = std::clamp<Index>(train_count, 1, total - 1);
    train_set.insert(train_set.end(), by_hash.begin(), by_hash.begin() + train_count);
  }
  std::sort(train_set.begin(), train_set.end());

  Manifest manifest;
  manifest.root = root;
  std::size_t instance_index = 0;
  for (const auto& family_name : config.families) {
    const ShapeFamily family = parse_family(family_name);
    for (Index i = 0; i < config.instances_per_family; ++i, ++instance_index) {
      const std::string& instance = instances[instance_index];
      const std::uint64_t seed = config.seed * 0x9e3779b97f4a7c15ULL ^ fnv1a(instance);
      Rng rng(seed);
      const ShapeSpec spec = random_shape_spec(family, seed);
      const Points dense = generate_shape(spec, config.dense_points);
      const Points complete = paired_subset(dense, config.complete_points, rng);
      const std::string complete_rel = "clouds/" + instance + ".complete.xyz";
      write_xyz(root / complete_rel, complete);
      const bool train = std::binary_search(train_set.begin(), train_set.end(), instance);
      for (Index v = 0; v < config.views_per_instance; ++v) {
        SampleRecord r;
        r.id = instance + "-v" + std::to_string(v);
        r.family = family_name;
        r.instance = instance;
        r.camera = kViews[static_cast<std::size_t>((static_cast<Index>(instance_index) + v) % 6)];
        r.partial = "clouds/" + r.id + ".partial.xyz";
        r.complete = complete_rel;
        r.split = train ? "train" : "test";
        write_xyz(root / r.partial,
                  occlude(dense, r.camera, config.occlusion_fraction, config.partial_points, rng));
        manifest.records.push_back(std::move(r));
      }
    }
  }
  write_manifest(root / kManifestName, manifest);
  return manifest;
}

void write_manifest(const fs::path& path, const Manifest& manifest) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest " + path.string());
  for (const auto& r : manifest.records) {
    nlohmann::ordered_json j;
    j["id"] = r.id;
    j["family"] = r.family;
    j["instance"] = r.instance;
    j["partial"] = r.partial;
    j["complete"] = r.complete;
    j["camera"] = {r.camera.x(), r.camera.y(), r.camera.z()};
    j["split"] = r.split;
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("failed writing manifest " + path.string());
}

Manifest read_manifest(const fs::path& path) {
  auto in = open_input(path);
  Manifest m;
  m.root = path.parent_path();
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (tokens(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      SampleRecord r;
      r.id = j.at("id").get<std::string>();
      r.family = j.at("family").get<std::string>();
      r.instance = j.value("instance", r.id);
      r.partial = j.at("partial").get<std::string>();
      r.complete = j.at("complete").get<std::string>();
      const auto& cam = j.at("camera");
      r.camera = Vec3(cam.at(0).get<double>(), cam.at(1).get<double>(), cam.at(2).get<double>());
      r.split = j.at("split").get<std::string>();
      m.records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("bad manifest record: ") + e.what(), number);
    }
  }
  return m;
}

}  // namespace pccforge
