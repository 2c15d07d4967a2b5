// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>
#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

#include "support.hpp"
#include "veinatn/dataset.hpp"
#include "veinatn/eval.hpp"
#include "veinatn/keyvalue.hpp"
#include "veinatn/model.hpp"
#include "veinatn/trainer.hpp"

using namespace veinatn;
using namespace veinatn::testing;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code = 0;
  std::string output;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Runs the CLI with `args`, capturing stdout and stderr together.
RunResult cli(const fs::path& dir, const std::string& args) {
  const fs::path log = dir / "cli.log";
  const std::string cmd = std::string("\"") + VEINATN_CLI_PATH + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.code = status;
  r.output = slurp(log);
  return r;
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

// Small, fast training config.
fs::path write_config(const fs::path& dir, int epochs = 1) {
  TrainConfig c = default_train_config();
  c.model.input_size = 32;
  c.model.pool_grid = 4;
  c.options.epochs = epochs;
  c.options.augment = false;
  const fs::path p = dir / "train.cfg";
  train_config_to_text(c).save(p);
  return p;
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("missing config key names the key and an example") {
    const auto dir = fresh_dir("cli_cfg");
    make_toy_dataset(dir / "data", 2, 2, 32, 1);
    KeyValueText full = KeyValueText::load(write_config(dir));
    KeyValueText missing;
    for (const auto& [k, v] : full.entries())
      if (k != "heads") missing.set(k, v);
    missing.save(dir / "bad.cfg");
    const auto r = cli(dir, "train --config " + q(dir / "bad.cfg") + " --data " + q(dir / "data") +
                                " --protocol heldin --out " + q(dir / "m.vann"));
    CHECK(r.code != 0);
    CHECK(r.output.find("heads") != std::string::npos);
    CHECK(r.output.find("4") != std::string::npos);
    const auto m = read_json(dir / "m.vann.manifest.json");
    CHECK(m["status"] == "failed");
    CHECK(m["command"] == "train");
    CHECK(m["error"].get<std::string>().find("heads") != std::string::npos);
    CHECK_FALSE(fs::exists(dir / "m.vann"));
  }

  TEST_CASE("no data root is a config error") {
    const auto dir = fresh_dir("cli_noroot");
    ::unsetenv("VEINATN_DATA_ROOT");
    const auto r = cli(dir, "score --count-only --out " + q(dir / "c.txt"));
    CHECK(r.code != 0);
    CHECK(r.output.find("VEINATN_DATA_ROOT") != std::string::npos);
  }

  TEST_CASE("preprocess mirrors the tree") {
    const auto dir = fresh_dir("cli_pre");
    make_toy_dataset(dir / "data", 3, 2, 32, 4, 2);
    const auto r = cli(dir, "preprocess --in " + q(dir / "data") + " --out " + q(dir / "enh") + " --threads 2");
    REQUIRE(r.code == 0);
    const auto src = scan_dataset(dir / "data");
    const auto dst = scan_dataset(dir / "enh");
    REQUIRE(dst.samples.size() == src.samples.size());
    for (std::size_t i = 0; i < src.samples.size(); ++i) {
      REQUIRE(dst.samples[i].size() == src.samples[i].size());
      for (std::size_t s = 0; s < src.samples[i].size(); ++s) {
        REQUIRE(dst.samples[i][s].size() == src.samples[i][s].size());
        for (std::size_t k = 0; k < src.samples[i][s].size(); ++k) {
          const auto& a = src.samples[i][s][k];
          const auto& b = dst.samples[i][s][k];
          CHECK(fs::relative(a, dir / "data") == fs::relative(b, dir / "enh"));
          CHECK(load_image(b) == clahe(load_image(a), {}));
        }
      }
    }
    CHECK(read_json(dir / "enh.manifest.json")["status"] == "ok");
  }

  TEST_CASE("train both streams, score, eval and explain") {
    const auto dir = fresh_dir("cli_pipeline");
    make_toy_dataset(dir / "data", 3, 2, 32, 6);
    const auto cfg = write_config(dir);
    auto r = cli(dir, "train --config " + q(cfg) + " --data " + q(dir / "data") +
                          " --protocol heldin --stream both --out " + q(dir / "m.vann"));
    REQUIRE(r.code == 0);
    CHECK(fs::exists(dir / "m.normal.vann"));
    CHECK(fs::exists(dir / "m.enhanced.vann"));
    CHECK(fs::exists(dir / "m.normal.curves.csv"));
    CHECK(fs::exists(dir / "m.enhanced.curves.csv"));
    CHECK_FALSE(fs::exists(dir / "m.vann"));
    const auto tm = read_json(dir / "m.vann.manifest.json");
    CHECK(tm["status"] == "ok");
    CHECK(tm["outputs"].size() == 4);

    r = cli(dir, "score --normal " + q(dir / "m.normal.vann") + " --enhanced " + q(dir / "m.enhanced.vann") +
                     " --data " + q(dir / "data") + " --protocol heldin --out " + q(dir / "scores.csv"));
    REQUIRE(r.code == 0);
    const std::string scores = slurp(dir / "scores.csv");
    CHECK(scores.substr(0, scores.find('\n')) == kScoresHeader);
    CHECK(read_scores_csv(dir / "scores.csv").size() == 6u * 3);

    r = cli(dir, "eval --scores " + q(dir / "scores.csv") + " --report " + q(dir / "report.txt") + " --det-out " +
                     q(dir / "det.csv"));
    REQUIRE(r.code == 0);
    const auto report = KeyValueText::load(dir / "report.txt");
    for (const char* key : {"normal.eer", "enhanced.eer", "fused.eer", "fused.tar_at_1pct"}) CHECK(report.contains(key));
    for (const char* view : {"normal", "enhanced", "fused"}) CHECK(fs::exists(dir / ("det." + std::string(view) + ".csv")));

    // EER read back from the written DET curve matches the scores report.
    r = cli(dir, "eval --det " + q(dir / "det.fused.csv") + " --report " + q(dir / "det_report.txt"));
    REQUIRE(r.code == 0);
    const auto det_report = KeyValueText::load(dir / "det_report.txt");
    CHECK(det_report.require("det.eer", "") == report.require("fused.eer", ""));

    const auto probe = scan_dataset(dir / "data").samples[0][0][0];
    r = cli(dir, "explain --normal " + q(dir / "m.normal.vann") + " --image " + q(probe) + " --out " +
                     q(dir / "ex"));
    CHECK(r.code != 0);
    CHECK(r.output.find("missing --claimed-id; valid range is 0..2") != std::string::npos);
    CHECK(read_json(dir / "ex.manifest.json")["status"] == "failed");

    r = cli(dir, "explain --normal " + q(dir / "m.normal.vann") + " --enhanced " + q(dir / "m.enhanced.vann") +
                     " --image " + q(probe) + " --claimed-id 0 --grid 4x4 --samples 64 --out " + q(dir / "ex"));
    REQUIRE(r.code == 0);
    for (const char* f : {"ex.normal.overlay.pgm", "ex.normal.weights.csv", "ex.enhanced.overlay.pgm",
                          "ex.enhanced.weights.csv"}) {
      CHECK(fs::exists(dir / f));
    }

    // info prints a total that equals the sum of the layer breakdown.
    r = cli(dir, "info " + q(dir / "m.normal.vann"));
    REQUIRE(r.code == 0);
    std::istringstream in(r.output);
    std::string line, section;
    std::size_t total = 0, layer_sum = 0;
    while (std::getline(in, line)) {
      if (line.rfind("# ", 0) == 0) {
        section = line.substr(2);
        continue;
      }
      std::istringstream ls(line);
      std::string name, tok, last;
      ls >> name;
      while (ls >> tok) last = tok;
      if (section == "parameters" && name == "total") total = std::stoul(last);
      if (section == "layers") layer_sum += std::stoul(last);
    }
    ModelConfig mc;
    mc.input_size = 32;
    mc.pool_grid = 4;
    mc.num_classes = 3;
    CHECK(total == count_params(mc));
    CHECK(layer_sum == total);
  }

  TEST_CASE("count-only score reads no pixels") {
    const auto dir = fresh_dir("cli_count");
    make_mock_tree(dir / "data", 4, 2, 3);
    const auto r = cli(dir, "score --count-only --data " + q(dir / "data") + " --protocol session --out " +
                                q(dir / "counts.txt"));
    REQUIRE(r.code == 0);
    const auto t = KeyValueText::load(dir / "counts.txt");
    CHECK(t.require("genuine", "") == "12");
    CHECK(t.require("impostor", "") == "36");
  }

  TEST_CASE("bad arguments exit nonzero") {
    const auto dir = fresh_dir("cli_args");
    CHECK(cli(dir, "").code != 0);
    CHECK(cli(dir, "nosuchcommand").code != 0);
    CHECK(cli(dir, "eval --report " + q(dir / "r.txt")).code != 0);
    CHECK(cli(dir, "ablate --depths 0..2 --data " + q(dir) + " --out " + q(dir / "ab")).code != 0);
    CHECK(cli(dir, "info " + q(dir / "missing.vann")).code != 0);
  }
}
