#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <vector>

#include "doctest.h"

namespace fs = std::filesystem;

namespace {

std::string binary() {
  const char* p = std::getenv("VICREGL_BIN");
  REQUIRE_MESSAGE(p != nullptr, "VICREGL_BIN not set");
  return p;
}

int run_cmd(const std::string& args) {
  const int rc = std::system((binary() + " " + args + " >/dev/null 2>&1").c_str());
  return WEXITSTATUS(rc);
}

std::string temp_dir() {
  auto p = fs::temp_directory_path() /
           ("vrl_cli_" +
            std::to_string(std::chrono::steady_clock::now().time_since_epoch().count()));
  fs::create_directories(p);
  return p.string();
}

std::vector<char> slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("usage errors exit with code 2") {
  CHECK(run_cmd("gen-data --out /tmp/x.vdsb --n 0") == 2);
  CHECK(run_cmd("pretrain --data /nonexistent --out-dir /tmp/x --alpha 1.5") == 2);
  CHECK(run_cmd("definitely-not-a-subcommand") == 2);
}

TEST_CASE("runtime failures exit with code 1") {
  const std::string dir = temp_dir();
  CHECK(run_cmd("eval-cls --ckpt " + dir + "/missing.vrgl --data " + dir +
                "/missing.vdsb") == 1);
  fs::remove_all(dir);
}

TEST_CASE("gen-data is deterministic and verify passes") {
  const std::string dir = temp_dir();
  CHECK(run_cmd("gen-data --out " + dir + "/a.vdsb --n 12 --size 32 --seed 7") == 0);
  CHECK(run_cmd("gen-data --out " + dir + "/b.vdsb --n 12 --size 32 --seed 7") == 0);
  CHECK(slurp(dir + "/a.vdsb") == slurp(dir + "/b.vdsb"));
  CHECK(run_cmd("verify --filter match") == 0);
  fs::remove_all(dir);
}

TEST_CASE("pretrain + eval + visualize round-trip through the CLI") {
  const std::string dir = temp_dir();
  // tiny config so the smoke test stays quick
  {
    std::ofstream cfg(dir + "/cfg.txt");
    cfg << "model.stem_channels = 4\n"
        << "model.stage_channels = 6,8\n"
        << "model.stage_strides = 2,2\n"
        << "model.projector_dims = 8,6,6\n"
        << "model.expander_dims = 8,10,10\n"
        << "augment.resolution = 32\n"
        << "multicrop.enabled = false\n"
        << "loss.gamma1 = 4\n"
        << "optim.batch_size = 4\n"
        << "optim.epochs = 1\n"
        << "optim.warmup_epochs = 0.5\n";
  }
  REQUIRE(run_cmd("gen-data --out " + dir + "/ds.vdsb --n 12 --size 32 --seed 3") == 0);
  CHECK(run_cmd("pretrain --data " + dir + "/ds.vdsb --out-dir " + dir +
                "/run --config " + dir + "/cfg.txt --seed 1") == 0);
  CHECK(fs::exists(dir + "/run/ckpt_latest.vrgl"));
  CHECK(fs::exists(dir + "/run/metrics.jsonl"));
  CHECK(fs::exists(dir + "/run/config.resolved"));

  CHECK(run_cmd("eval-cls --ckpt " + dir + "/run/ckpt_latest.vrgl --data " + dir +
                "/ds.vdsb --epochs 2 --out-dir " + dir + "/run") == 0);
  CHECK(run_cmd("eval-seg --ckpt " + dir + "/run/ckpt_latest.vrgl --data " + dir +
                "/ds.vdsb --epochs 2 --out-dir " + dir + "/run") == 0);
  CHECK(fs::exists(dir + "/run/probe_results.jsonl"));

  CHECK(run_cmd("visualize-matches --data " + dir + "/ds.vdsb --index 1 --out-dir " +
                dir + "/viz --seed 9") == 0);
  const auto first = slurp(dir + "/viz/matches_1.png");
  CHECK(!first.empty());
  CHECK(run_cmd("visualize-matches --data " + dir + "/ds.vdsb --index 1 --out-dir " +
                dir + "/viz --seed 9") == 0);
  CHECK(slurp(dir + "/viz/matches_1.png") == first);  // byte-stable

  fs::remove_all(dir);
}
