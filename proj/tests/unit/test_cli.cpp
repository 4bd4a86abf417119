#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "doctest.h"
#include "histnet/data.hpp"
#include "histnet/image_io.hpp"
#include "json.hpp"

using namespace histnet;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code;
  std::string output;
};

RunResult run(const std::string& args) {
  const fs::path log = fs::temp_directory_path() / "histnet_cli_test_output.txt";
  const std::string cmd = std::string(HISTNET_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path workspace() {
  fs::path dir = fs::temp_directory_path() / "histnet_cli_test";
  fs::remove_all(dir);
  fs::create_directories(dir / "imgs");
  for (int i = 0; i < 20; ++i) {
    RgbImage img(40, 40);
    for (int y = 0; y < 40; ++y)
      for (int x = 0; x < 40; ++x) {
        const bool inner = y >= 10 && y < 30 && x >= 10 && x < 30;
        img.at(y, x, 0) = inner ? 0.9 : 0.1 + 0.03 * i;
        img.at(y, x, 1) = inner ? 0.2 : 0.5;
        img.at(y, x, 2) = inner ? 0.1 : 0.8 - 0.02 * i;
      }
    char name[32];
    std::snprintf(name, sizeof name, "c%02d.png", i);
    write_rgb_png(dir / "imgs" / name, img);
  }
  RgbImage gray(40, 40);
  for (int y = 0; y < 40; ++y)
    for (int x = 0; x < 40; ++x)
      for (int c = 0; c < 3; ++c) gray.at(y, x, c) = x / 39.0;
  write_rgb_png(dir / "imgs" / "gray.png", gray);
  return dir;
}

}  // namespace

TEST_CASE("help and argument errors") {
  auto r = run("--help");
  CHECK(r.code == 0);
  CHECK(r.output.find("dataset-build") != std::string::npos);
  r = run("train --help");
  CHECK(r.code == 0);
  CHECK(r.output.find("lambda_par") != std::string::npos);
  CHECK(run("").code == 2);
  CHECK(run("train --no-such-flag").code == 2);
  CHECK(run("dataset-stats --manifest /nonexistent/manifest.jsonl").code == 2);
}

TEST_CASE("pipeline end to end") {
  const fs::path w = workspace();
  const std::string ws = w.string();

  auto r = run("dataset-build --images " + ws + "/imgs --out " + ws + "/ds --test-fraction 0.25 --seed 3");
  REQUIRE_MESSAGE(r.code == 0, r.output);
  auto m = DatasetManifest::load(w / "ds" / "manifest.jsonl");
  CHECK(m.records.size() == 20);
  auto log = nlohmann::json::parse(slurp(w / "ds" / "build_log.json"));
  CHECK(log["rejected_grayscale"] == 1);
  CHECK(fs::exists(w / "ds" / "config_echo.json"));

  // Non-empty output needs --force.
  CHECK(run("dataset-build --images " + ws + "/imgs --out " + ws + "/ds").code == 2);
  CHECK(run("dataset-build --images " + ws + "/imgs --out " + ws + "/ds --force").code == 0);

  r = run("dataset-stats --manifest " + ws + "/ds/manifest.jsonl --json");
  REQUIRE(r.code == 0);
  CHECK(nlohmann::json::parse(r.output)["total"] == 20);

  const std::string manifest = ws + "/ds/manifest.jsonl";
  r = run("train --manifest " + manifest + " --out " + ws + "/run --set epochs=1 --seed 5");
  REQUIRE_MESSAGE(r.code == 0, r.output);
  CHECK(fs::exists(w / "run" / "checkpoints" / "final"));
  CHECK(slurp(w / "run" / "config.txt").find("seed = 5") != std::string::npos);
  auto resolved = nlohmann::json::parse(slurp(w / "run" / "resolved_config.json"));
  CHECK(resolved["branches"]["info_d2"] == true);
  std::istringstream lines(slurp(w / "run" / "train_log.jsonl"));
  int n = 0;
  for (std::string line; std::getline(lines, line); ++n) CHECK(nlohmann::json::parse(line).contains("kind"));
  CHECK(n == 6);  // the forced rebuild used the default split: 18 training images, three batches

  r = run("ablate --preset baseline --manifest " + manifest + " --out " + ws + "/abl --set epochs=1");
  REQUIRE(r.code == 0);
  resolved = nlohmann::json::parse(slurp(w / "abl" / "resolved_config.json"));
  CHECK(resolved["branches"]["info_d2"] == false);
  CHECK(resolved["branches"]["parsing_g3"] == false);
  CHECK(resolved["effective_weights"]["lambda_par"] == 0.0);

  CHECK(run("train --manifest " + manifest + " --out " + ws + "/bad --set nope=1").code == 2);
  CHECK(run("train --manifest " + manifest + " --out " + ws + "/nan --set learning_rate=1e30 --set epochs=4").code == 3);

  const std::string ckpt = ws + "/run/checkpoints/final";
  r = run("colorize --checkpoint " + ckpt + " " + ws + "/imgs/c00.png " + ws + "/imgs/gray.png " + ws +
          "/missing.png --out " + ws + "/col");
  REQUIRE_MESSAGE(r.code == 0, r.output);
  CHECK(r.output.find("missing.png") != std::string::npos);
  CHECK(fs::exists(w / "col" / "c00.png"));
  const Image8 trip_color = read_image8(w / "col" / "c00_triptych.png");
  const Image8 trip_gray = read_image8(w / "col" / "gray_triptych.png");
  CHECK(trip_color.width == 3 * 40 + 2 * 2);
  CHECK(trip_gray.width == 2 * 40 + 2);
  CHECK(run("colorize --checkpoint " + ckpt + " " + ws + "/missing.png --out " + ws + "/col2").code == 2);

  r = run("evaluate --checkpoint " + ckpt + " --manifest " + manifest + " --out " + ws + "/ev");
  REQUIRE_MESSAGE(r.code == 0, r.output);
  CHECK(r.output.find("PSNR") != std::string::npos);
  auto metrics = nlohmann::json::parse(slurp(w / "ev" / "metrics.json"));
  CHECK(metrics["sample_count"] == 2);
  r = run("evaluate --checkpoint " + ckpt + " --manifest " + manifest + " --perceptual lpips:" + ws + "/none");
  CHECK(r.code == 2);
  CHECK(r.output.find("fallback") != std::string::npos);
}
