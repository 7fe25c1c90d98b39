#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "pccforge/commands.hpp"

using namespace pccforge;

namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(PCCFORGE_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path fresh(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("pccforge-cli-" + name);
  fs::remove_all(dir);
  return dir;
}

/// A configuration small enough for every subcommand to finish in seconds.
fs::path tiny_config(const fs::path& dir) {
  fs::create_directories(dir);
  const fs::path path = dir / "tiny.cfg";
  std::ofstream out(path);
  out << "dataset_dir = " << (dir / "data" / "nested").string() << "\n"
      << "families = ellipsoid, lamp-like\ninstances_per_family = 3\nviews_per_instance = 2\n"
      << "dense_points = 256\ncomplete_points = 128\npartial_points = 64\n"
      << "diffusion_steps = 20\nsample_steps = 5\nencoder_widths = 16, 32\nlatent_dim = 16\n"
      << "time_embed_dim = 8\ndenoiser_widths = 32, 32\ndcg_iterations = 3\ndcg_batch = 2\n"
      << "dcg_points_per_shape = 64\nrefine_points = 128\npatch_size = 8\ntopk = 8\nedge_k = 4\n"
      << "descriptor_widths = 8, 8, 8, 16\nangle_widths = 8, 8\nhead_widths = 16\npartial_patch_cap = 32\n"
      << "cref_epochs = 1\ncref_query_cap = 16\nlog_every = 1\nvalidation_samples = 1\n";
  return path;
}

std::string last_line(const fs::path& path) {
  std::ifstream in(path);
  std::string line, last;
  while (std::getline(in, line))
    if (!line.empty()) last = line;
  return last;
}

}  // namespace

TEST_CASE("usage errors exit with status 1") {
  CHECK(run("") == 1);
  CHECK(run("no-such-command") == 1);
  CHECK(run("--set topk=x dataset") == 1);
  CHECK(run("--set no_such_key=1 dataset") == 1);
  CHECK(run("--set families=teapot dataset") == 1);
  CHECK(run("complete -i only-input.xyz") == 1);
  CHECK(run("--help") == 0);
}

TEST_CASE("full command sequence on a tiny configuration") {
  const fs::path dir = fresh("flow");
  const std::string cfg = "-c " + tiny_config(dir).string() + " -r " + (dir / "run").string();

  REQUIRE(run(cfg + " dataset") == 0);
  const fs::path manifest = dir / "data" / "nested" / kManifestName;
  REQUIRE(fs::exists(manifest));
  CHECK(read_manifest(manifest).records.size() == 12);

  CHECK(run(cfg + " train-cref") == 2);  // no generator checkpoint yet

  REQUIRE(run(cfg + " train-dcg") == 0);
  CHECK(load_model(dir / "run" / "dcg.ckpt", "dcg").step == 3);
  REQUIRE(run(cfg + " --set dcg_iterations=2 train-dcg --resume " + (dir / "run" / "dcg.ckpt").string()) == 0);
  CHECK(load_model(dir / "run" / "dcg.ckpt", "dcg").step == 5);
  CHECK(last_line(dir / "run" / "dcg_loss.csv").rfind("5,", 0) == 0);

  REQUIRE(run(cfg + " train-cref") == 0);
  CHECK(fs::exists(dir / "run" / "cref.ckpt"));
  CHECK(fs::exists(dir / "run" / "cref_loss.csv"));
  CHECK_FALSE(fs::is_empty(dir / "run" / "coarse"));

  const Manifest m = read_manifest(manifest);
  const fs::path input = m.resolve(m.records.front().partial);
  const fs::path out = dir / "out" / "completed.ply";
  REQUIRE(run(cfg + " complete -i " + input.string() + " -o " + out.string() + " --emit-coarse " +
              (dir / "out" / "coarse.xyz").string() + " --heatmap " + (dir / "out" / "heat.csv").string()) == 0);
  CHECK(read_cloud(out).rows() == 128);
  CHECK(read_cloud(dir / "out" / "coarse.xyz").rows() == 128);
  CHECK(fs::exists(dir / "out" / "heat.csv"));

  REQUIRE(run(cfg + " evaluate --mode coarse --out " + (dir / "eval").string()) == 0);
  CHECK(fs::exists(dir / "eval" / "metrics.csv"));
  CHECK(fs::exists(dir / "eval" / "summary.json"));
  CHECK(run(cfg + " evaluate --mode nonsense") == 1);
  CHECK(run(cfg + " --set dataset_dir=" + (dir / "nowhere").string() + " evaluate") == 2);
}
