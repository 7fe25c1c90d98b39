#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "pccforge/config.hpp"
#include "pccforge/types.hpp"

namespace pccforge {

enum class ShapeFamily { Ellipsoid, BoxAssembly, WingedBody, LampLike };

std::string to_string(ShapeFamily family);
ShapeFamily parse_family(const std::string& name);

/// Parametric surface description. Every family is mirror-symmetric about the plane
/// with normal `symmetry_normal` through the origin (x = 0).
struct ShapeSpec {
  ShapeFamily family = ShapeFamily::Ellipsoid;
  std::vector<double> parameters;
  Vec3 symmetry_normal = Vec3::UnitX();
  std::uint64_t seed = 0;
};

/// Draws family parameters from `seed`.
ShapeSpec random_shape_spec(ShapeFamily family, std::uint64_t seed);

/// n area-uniform samples of the surface, unnormalised. Samples come in mirrored pairs so
/// the point set itself is symmetric. Throws GeometryError on invalid parameters.
Points sample_surface(const ShapeSpec& spec, Index n);

/// Centre at the centroid and scale so the farthest point lies on the unit sphere.
Points normalize(const Points& cloud);

/// sample_surface followed by normalize.
Points generate_shape(const ShapeSpec& spec, Index n);

/// Removes max(1, round(fraction * N)) points with the largest projection onto `view`,
/// then draws `size` of the remaining points (without replacement when possible).
Points occlude(const Points& cloud, const Vec3& view, double fraction, Index size, Rng& rng);

// ---------------------------------------------------------------------------------
// Files

Points read_xyz(const std::filesystem::path& path);
void write_xyz(const std::filesystem::path& path, const Points& cloud);
Points read_ply(const std::filesystem::path& path);
void write_ply(const std::filesystem::path& path, const Points& cloud);

/// Dispatches on the extension (.xyz or .ply); anything else is a FormatError.
Points read_cloud(const std::filesystem::path& path);
void write_cloud(const std::filesystem::path& path, const Points& cloud);

// ---------------------------------------------------------------------------------
// Dataset

struct SampleRecord {
  std::string id;
  std::string family;
  std::string instance;
  std::string partial;   // relative to the manifest directory
  std::string complete;  // relative to the manifest directory
  Vec3 camera = Vec3::UnitZ();
  std::string split;     // "train" or "test"
};

struct Manifest {
  std::filesystem::path root;
  std::vector<SampleRecord> records;

  std::vector<const SampleRecord*> split(const std::string& name) const;
  std::filesystem::path resolve(const std::string& relative) const { return root / relative; }
};

inline constexpr const char* kManifestName = "manifest.jsonl";

/// 64-bit FNV-1a.
std::uint64_t fnv1a(const std::string& text);

/// Generates families x instances x views records under `config.dataset_dir`, writes
/// the clouds and `manifest.jsonl`, and returns the manifest.
Manifest build_dataset(const RunConfig& config);

void write_manifest(const std::filesystem::path& path, const Manifest& manifest);
Manifest read_manifest(const std::filesystem::path& path);

}  // namespace pccforge
