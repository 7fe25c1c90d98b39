#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "pccforge/types.hpp"

namespace pccforge {

/// How Euclidean and descriptor similarities are combined into W.
enum class SimilarityMode {
  Sum,            // exp(-W1) + exp(W2)
  Product,        // exp(-W1) * exp(W2)
  EuclideanOnly,  // exp(-W1)
  FeatureOnly,    // exp(W2)
};

std::string to_string(SimilarityMode mode);
SimilarityMode parse_similarity_mode(const std::string& text);

/// Every tunable of a run. Plain-text `key = value` files map one-to-one onto fields.
struct RunConfig {
  std::uint64_t seed = 1;

  // Dataset
  std::string dataset_dir = "dataset";
  std::vector<std::string> families{"ellipsoid", "box-assembly", "winged-body", "lamp-like"};
  Index instances_per_family = 16;
  Index views_per_instance = 4;
  Index complete_points = 2048;
  Index partial_points = 1024;
  Index dense_points = 4096;
  double occlusion_fraction = 0.5;
  double train_fraction = 0.8;

  // Coarse generator
  Index diffusion_steps = 500;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  Index sample_steps = 500;  // < diffusion_steps enables strided sampling
  Index latent_dim = 512;
  Index time_embed_dim = 32;
  std::vector<Index> encoder_widths{64, 128, 256};
  std::vector<Index> denoiser_widths{128, 256, 256};
  Index dcg_iterations = 2000;
  Index dcg_batch = 8;
  Index dcg_points_per_shape = 512;
  double dcg_learning_rate = 0.01;

  // Refiner
  Index refine_points = 2048;
  Index patch_size = 64;
  Index topk = 64;
  Index edge_k = 16;
  std::vector<Index> descriptor_widths{64, 64, 128, 256};
  std::vector<Index> angle_widths{128, 64};
  std::vector<Index> head_widths{256, 128};
  Index partial_patch_cap = 0;  // 0 = one patch per partial point
  Index cref_epochs = 50;
  Index cref_query_cap = 0;     // 0 = refine every adjustable point while training
  double cref_learning_rate = 0.01;
  SimilarityMode similarity = SimilarityMode::Sum;
  bool mixed_sampling = true;
  bool freezing = true;
  bool rigid_transform = true;
  Index fps_start = 0;

  // Shared training knobs
  double momentum = 0.9;
  double grad_clip = 1.0;
  Index log_every = 10;
  Index validation_samples = 4;

  // Evaluation
  double fscore_tau = 1e-3;
};

/// Parses `key = value` lines; '#' starts a comment. Throws ParseError with the line.
std::vector<std::pair<std::string, std::string>> parse_key_values(const std::string& text);

/// Sets one field from its textual value. Unknown keys and bad values throw ConfigError
/// naming the key.
void apply_setting(RunConfig& config, const std::string& key, const std::string& value);
void apply_settings(RunConfig& config, const std::vector<std::pair<std::string, std::string>>& settings);

RunConfig load_config(const std::filesystem::path& path);
/// Effective configuration in the same `key = value` format, one key per line, stable order.
std::string to_text(const RunConfig& config);
void validate(const RunConfig& config);

}  // namespace pccforge
