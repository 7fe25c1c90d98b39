#include "pccforge/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace pccforge {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& why) {
  throw ConfigError("config key '" + key + "': invalid value '" + value + "' (" + why + ")");
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) bad_value(key, value, "not a number");
  return out;
}

void parse_into(const std::string& key, const std::string& v, std::uint64_t& out) {
  out = parse_number<std::uint64_t>(key, v);
}
void parse_into(const std::string& key, const std::string& v, Index& out) { out = parse_number<Index>(key, v); }
void parse_into(const std::string& key, const std::string& v, double& out) { out = parse_number<double>(key, v); }
void parse_into(const std::string& key, const std::string& v, bool& out) {
  if (v == "true" || v == "1" || v == "on" || v == "yes")
    out = true;
  else if (v == "false" || v == "0" || v == "off" || v == "no")
    out = false;
  else
    bad_value(key, v, "expected true/false");
}
void parse_into(const std::string&, const std::string& v, std::string& out) { out = v; }
void parse_into(const std::string& key, const std::string& v, std::vector<std::string>& out) {
  out = split_list(v);
  if (out.empty()) bad_value(key, v, "empty list");
}
void parse_into(const std::string& key, const std::string& v, std::vector<Index>& out) {
  out.clear();
  for (const auto& item : split_list(v)) out.push_back(parse_number<Index>(key, item));
  if (out.empty()) bad_value(key, v, "empty list");
}
void parse_into(const std::string& key, const std::string& v, SimilarityMode& out) {
  try {
    out = parse_similarity_mode(v);
  } catch (const ConfigError&) {
    bad_value(key, v, "expected sum, product, euclidean or feature");
  }
}

std::string format(std::uint64_t v) { return std::to_string(v); }
std::string format(Index v) { return std::to_string(v); }
std::string format(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}
std::string format(bool v) { return v ? "true" : "false"; }
std::string format(const std::string& v) { return v; }
template <typename T>
std::string format(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + format(v[i]);
  return out;
}
std::string format(SimilarityMode m) { return to_string(m); }

struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
Field field(const char* key, T RunConfig::*member) {
  return Field{key, [key, member](RunConfig& c, const std::string& v) { parse_into(key, v, c.*member); },
               [member](const RunConfig& c) { return format(c.*member); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      field("seed", &RunConfig::seed),
      field("dataset_dir", &RunConfig::dataset_dir),
      field("families", &RunConfig::families),
      field("instances_per_family", &RunConfig::instances_per_family),
      field("views_per_instance", &RunConfig::views_per_instance),
      field("complete_points", &RunConfig::complete_points),
      field("partial_points", &RunConfig::partial_points),
      field("dense_points", &RunConfig::dense_points),
      field("occlusion_fraction", &RunConfig::occlusion_fraction),
      field("train_fraction", &RunConfig::train_fraction),
      field("diffusion_steps", &RunConfig::diffusion_steps),
      field("beta_start", &RunConfig::beta_start),
      field("beta_end", &RunConfig::beta_end),
      field("sample_steps", &RunConfig::sample_steps),
      field("latent_dim", &RunConfig::latent_dim),
      field("time_embed_dim", &RunConfig::time_embed_dim),
      field("encoder_widths", &RunConfig::encoder_widths),
      field("denoiser_widths", &RunConfig::denoiser_widths),
      field("dcg_iterations", &RunConfig::dcg_iterations),
      field("dcg_batch", &RunConfig::dcg_batch),
      field("dcg_points_per_shape", &RunConfig::dcg_points_per_shape),
      field("dcg_learning_rate", &RunConfig::dcg_learning_rate),
      field("refine_points", &RunConfig::refine_points),
      field("patch_size", &RunConfig::patch_size),
      field("topk", &RunConfig::topk),
      field("edge_k", &RunConfig::edge_k),
      field("descriptor_widths", &RunConfig::descriptor_widths),
      field("angle_widths", &RunConfig::angle_widths),
      field("head_widths", &RunConfig::head_widths),
      field("partial_patch_cap", &RunConfig::partial_patch_cap),
      field("cref_epochs", &RunConfig::cref_epochs),
      field("cref_query_cap", &RunConfig::cref_query_cap),
      field("cref_learning_rate", &RunConfig::cref_learning_rate),
      field("similarity", &RunConfig::similarity),
      field("mixed_sampling", &RunConfig::mixed_sampling),
      field("freezing", &RunConfig::freezing),
      field("rigid_transform", &RunConfig::rigid_transform),
      field("fps_start", &RunConfig::fps_start),
      field("momentum", &RunConfig::momentum),
      field("grad_clip", &RunConfig::grad_clip),
      field("log_every", &RunConfig::log_every),
      field("validation_samples", &RunConfig::validation_samples),
      field("fscore_tau", &RunConfig::fscore_tau),
  };
  return table;
}

}  // namespace

std::string to_string(SimilarityMode mode) {
  switch (mode) {
    case SimilarityMode::Sum: return "sum";
    case SimilarityMode::Product: return "product";
    case SimilarityMode::EuclideanOnly: return "euclidean";
    case SimilarityMode::FeatureOnly: return "feature";
  }
  return "sum";
}

SimilarityMode parse_similarity_mode(const std::string& text) {
  if (text == "sum") return SimilarityMode::Sum;
  if (text == "product") return SimilarityMode::Product;
  if (text == "euclidean") return SimilarityMode::EuclideanOnly;
  if (text == "feature") return SimilarityMode::FeatureOnly;
  throw ConfigError("unknown similarity mode '" + text + "'");
}

std::vector<std::pair<std::string, std::string>> parse_key_values(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("expected 'key = value'", number);
    std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ParseError("empty key", number);
    out.emplace_back(std::move(key), trim(line.substr(eq + 1)));
  }
  return out;
}

void apply_setting(RunConfig& config, const std::string& key, const std::string& value) {
  for (const auto& f : fields()) {
    if (f.key == key) {
      f.set(config, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

void apply_settings(RunConfig& config, const std::vector<std::pair<std::string, std::string>>& settings) {
  for (const auto& [k, v] : settings) apply_setting(config, k, v);
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  RunConfig config;
  apply_settings(config, parse_key_values(buffer.str()));
  return config;
}

std::string to_text(const RunConfig& config) {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(config) + "\n";
  return out;
}

void validate(const RunConfig& c) {
  auto positive = [](const char* key, Index v) {
    if (v < 1) throw ConfigError("config key '" + std::string(key) + "' must be positive");
  };
  positive("instances_per_family", c.instances_per_family);
  positive("views_per_instance", c.views_per_instance);
  positive("complete_points", c.complete_points);
  positive("partial_points", c.partial_points);
  positive("dense_points", c.dense_points);
  positive("diffusion_steps", c.diffusion_steps);
  positive("sample_steps", c.sample_steps);
  positive("latent_dim", c.latent_dim);
  positive("time_embed_dim", c.time_embed_dim);
  positive("dcg_batch", c.dcg_batch);
  positive("dcg_points_per_shape", c.dcg_points_per_shape);
  positive("refine_points", c.refine_points);
  positive("patch_size", c.patch_size);
  positive("topk", c.topk);
  positive("edge_k", c.edge_k);
  positive("log_every", c.log_every);
  if (c.patch_size < 3) throw ConfigError("config key 'patch_size' must be at least 3");
  if (c.sample_steps > c.diffusion_steps)
    throw ConfigError("config key 'sample_steps' must not exceed diffusion_steps");
  if (c.time_embed_dim % 2 != 0) throw ConfigError("config key 'time_embed_dim' must be even");
  if (!(c.occlusion_fraction > 0.0 && c.occlusion_fraction < 1.0))
    throw ConfigError("config key 'occlusion_fraction' must lie in (0, 1)");
  if (!(c.train_fraction > 0.0 && c.train_fraction < 1.0))
    throw ConfigError("config key 'train_fraction' must lie in (0, 1)");
  if (!(c.beta_start > 0.0 && c.beta_start <= c.beta_end && c.beta_end < 1.0))
    throw ConfigError("config keys 'beta_start'/'beta_end' must satisfy 0 < start <= end < 1");
  for (const auto& family : c.families)
    if (family != "ellipsoid" && family != "box-assembly" && family != "winged-body" && family != "lamp-like")
      throw ConfigError("config key 'families': unknown family '" + family + "'");
  if (c.fscore_tau <= 0.0) throw ConfigError("config key 'fscore_tau' must be positive");
  if (c.encoder_widths.empty() || c.denoiser_widths.empty() || c.descriptor_widths.empty() ||
      c.angle_widths.empty() || c.head_widths.empty())
    throw ConfigError("network width lists must be non-empty");
}

}  // namespace pccforge
