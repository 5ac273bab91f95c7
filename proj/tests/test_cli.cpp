// Runs the idk executable end to end on a tiny world.

#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <string>

#include "idk/io.hpp"

namespace {

using idk::fs::path;

const path kRoot = path(IDK_TEST_WORK_DIR) / "cli";

int run(const std::string& args) {
  const std::string cmd = std::string(IDK_CLI_PATH) + " " + args + " > " +
                          (kRoot / "last_output.txt").string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

const std::string kData = "--entities 24 --relations 2 --repetitions 16 4 1 --context-len 16 "
                          "--heldout-windows 4";
const std::string kSmallModel = "--d-model 16 --layers 1 --heads 2";

std::string dir(const std::string& name) { return (kRoot / name).string(); }

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    idk::fs::remove_all(kRoot);
    idk::ensure_dir(kRoot);
    ASSERT_EQ(run("gen-data " + kData + " --out " + dir("data")), 0);
    ASSERT_EQ(run("pretrain --data " + dir("data") + " --out " + dir("pre") + " " + kSmallModel +
                  " --steps 30 --batch-size 4 --eval-every 10"),
              0);
    ASSERT_EQ(run("tune --data " + dir("data") + " --pretrain " + dir("pre") + " --out " + dir("tune") +
                  " --steps 10 --batch-size 4 --eval-every 5"),
              0);
  }
};

TEST_F(Cli, GenDataIsReproducible) {
  ASSERT_EQ(run("gen-data " + kData + " --out " + dir("data2")), 0);
  EXPECT_EQ(idk::read_file(kRoot / "data" / "manifest.json"), idk::read_file(kRoot / "data2" / "manifest.json"));
  EXPECT_EQ(idk::read_file(kRoot / "data" / "corpus.bin"), idk::read_file(kRoot / "data2" / "corpus.bin"));
}

TEST_F(Cli, TrainingWritesRunFiles) {
  for (const char* f : {"config.json", "metrics.jsonl", "events.jsonl", "summary.json", "final/model.ckpt"}) {
    EXPECT_TRUE(idk::fs::exists(kRoot / "pre" / f)) << f;
    EXPECT_TRUE(idk::fs::exists(kRoot / "tune" / f)) << f;
  }
  EXPECT_EQ(idk::read_jsonl(kRoot / "tune" / "metrics.jsonl").size(), 10u);
}

TEST_F(Cli, EvaluateAndReport) {
  ASSERT_EQ(run("evaluate --data " + dir("data") + " --model " + dir("tune") + " --base " + dir("pre")), 0);
  const auto r = idk::read_json(kRoot / "tune" / "eval" / "report.json");
  for (const char* k : {"precision", "recall", "f1", "idk_recall", "idk_error_rate", "config_hash",
                        "models", "error_categories"})
    EXPECT_TRUE(r.contains(k)) << k;
  ASSERT_EQ(run("report " + dir("tune/eval") + " --out " + dir("report")), 0);
  EXPECT_TRUE(idk::fs::exists(kRoot / "report" / "comparison.csv"));
}

TEST_F(Cli, ReportRejectsMixedPromptSets) {
  ASSERT_EQ(run("gen-data " + kData + " --world-seed 7 --out " + dir("data7")), 0);
  ASSERT_EQ(run("pretrain --data " + dir("data7") + " --out " + dir("pre7") + " " + kSmallModel +
                " --steps 3 --batch-size 2"),
            0);
  ASSERT_EQ(run("tune --data " + dir("data7") + " --pretrain " + dir("pre7") + " --out " + dir("tune7") +
                " --steps 3 --batch-size 2"),
            0);
  ASSERT_EQ(run("evaluate --data " + dir("data7") + " --model " + dir("tune7") + " --base " + dir("pre7")), 0);
  ASSERT_EQ(run("evaluate --data " + dir("data") + " --model " + dir("tune") + " --base " + dir("pre") +
                " --out " + dir("eval_main")),
            0);
  EXPECT_EQ(run("report " + dir("eval_main") + " " + dir("tune7/eval") + " --out " + dir("mixed")), 1);
}

TEST_F(Cli, AblateWritesOneRowPerCell) {
  ASSERT_EQ(run("ablate --data " + dir("data") + " --pretrain " + dir("pre") + " --out " + dir("ablate") +
                " --pis 0.5 1 --lambda-modes adaptive fixed --fp-reg-modes on --steps 4 --batch-size 2"),
            0);
  const std::string csv = idk::read_file(kRoot / "ablate" / "ablation.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
}

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(run("tune --data " + dir("data") + " --pretrain " + dir("missing") + " --out " + dir("x")), 3);
  EXPECT_EQ(run("pretrain --data " + dir("missing")), 3);
  EXPECT_EQ(run("tune --data " + dir("data") + " --pretrain " + dir("pre") + " --out " + dir("x") +
                " --pi 2"),
            1);
  EXPECT_EQ(run("gen-data --entities 0 --out " + dir("x")), 1);
  EXPECT_EQ(run("no-such-command"), 1);
  EXPECT_EQ(run("pretrain --unknown-flag 3"), 1);
  idk::write_file(kRoot / "bad.toml", "[pretrain]\nsteps = \"many\"\n");
  EXPECT_EQ(run("pretrain --config " + dir("bad.toml")), 1);
  EXPECT_EQ(run("--help"), 0);
}

TEST_F(Cli, ConfigFileSetsOptions) {
  idk::write_file(kRoot / "tune.toml", "[tune]\nsteps = 3\nbatch-size = 2\npi = 0.25\n");
  ASSERT_EQ(run("tune --config " + dir("tune.toml") + " --data " + dir("data") + " --pretrain " +
                dir("pre") + " --out " + dir("tune_cfg")),
            0);
  const auto cfg = idk::read_json(kRoot / "tune_cfg" / "config.json");
  EXPECT_EQ(cfg["train"]["steps"], 3);
  EXPECT_EQ(cfg["idk"]["pi"], 0.25);
}

TEST_F(Cli, CollapseAbortExitsWithTwo) {
  EXPECT_EQ(run("tune --data " + dir("data") + " --pretrain " + dir("pre") + " --out " + dir("abort") +
                " --pi 1 --adaptive off --fixed-lambda 1 --fp-reg off --abort-on-collapse"
                " --steps 80 --batch-size 4 --max-lr 0.05 --min-lr 0.05 --warmup-frac 0"),
            2);
  EXPECT_TRUE(idk::fs::exists(kRoot / "abort" / "aborted.ckpt"));
}

}  // namespace
