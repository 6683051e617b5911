#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cvadapt/featstore.hpp"
#include "test_support.hpp"

namespace cvadapt {
namespace {

namespace fs = std::filesystem;
using testing::TempDir;

struct Run {
  int code = -1;
  std::string err;
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::string& path, const std::string& text) { std::ofstream(path, std::ios::binary) << text; }

Run cli(const TempDir& dir, const std::string& args) {
  std::string err = dir.file("stderr.txt");
  std::string cmd = std::string("\"") + CVADAPT_CLI_PATH + "\" -q " + args + " 2>\"" + err + "\" >/dev/null";
  int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(err)};
}

std::string first_line(const std::string& path) {
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  return line;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    write_text(dir.file("synth.json"),
               R"({"num_scenes": 40, "d0": 8, "queries_per_scene": 2, "eval_queries_per_scene": 1, "seed": 9})");
    write_text(dir.file("train.json"), R"({"T": 5, "M": 40, "seed": 1})");
    ASSERT_EQ(cli(dir, "synth --config " + dir.file("synth.json") + " --out " + dir.file("data")).code, 0);
  }
  std::string data(const std::string& name) const { return dir.file("data/" + name); }
  TempDir dir;
};

TEST_F(CliTest, SynthWritesAllArtifacts) {
  for (const char* f : {"queries.cvft", "refs.cvft", "gt.csv", "queries_eval.cvft", "gt_eval.csv", "geo.csv",
                        "manifest.json"}) {
    EXPECT_TRUE(fs::exists(data(f))) << f;
  }
  EXPECT_EQ(load_feature_set(data("queries.cvft")).count(), 80u);
  EXPECT_EQ(first_line(data("gt.csv")), "query_id,ref_id");
  EXPECT_EQ(first_line(data("geo.csv")), "id,lat,lon");
}

TEST_F(CliTest, TrainEvalInspectLocalize) {
  auto train = cli(dir, "train --queries " + data("queries.cvft") + " --refs " + data("refs.cvft") + " --config " +
                            dir.file("train.json") + " --out " + dir.file("ckpt"));
  ASSERT_EQ(train.code, 0) << train.err;
  for (const char* f : {"adapter.cvad", "trainer.cvts", "train_log.csv"}) EXPECT_TRUE(fs::exists(dir.file("ckpt/") + f));
  EXPECT_EQ(first_line(dir.file("ckpt/train_log.csv")), "iter,l_em_qr,l_em_rq,l_re_q,l_re_r,valid_rows,ms");

  auto eval = cli(dir, "eval --queries " + data("queries_eval.cvft") + " --refs " + data("refs.cvft") + " --ckpt " +
                           dir.file("ckpt") + " --gt " + data("gt_eval.csv") + " --k 1,3,20 --out " +
                           dir.file("report.json"));
  ASSERT_EQ(eval.code, 0) << eval.err;
  auto report = nlohmann::json::parse(slurp(dir.file("report.json")));
  EXPECT_EQ(report["recall"].size(), 3u);
  for (const char* k : {"1", "3", "20"}) EXPECT_TRUE(report["recall"].contains(k)) << k;
  EXPECT_EQ(report["num_queries"], 40);
  EXPECT_EQ(first_line(dir.file("report.csv")), "query_id,top1_ref_id,top1_similarity,correct,ap");

  ASSERT_EQ(cli(dir, "inspect --report " + dir.file("report.json") + " --mode histogram --out " + dir.file("hist.csv")).code, 0);
  EXPECT_TRUE(fs::exists(dir.file("hist.csv")));
  EXPECT_TRUE(fs::exists(dir.file("hist_delta.csv")));
  ASSERT_EQ(cli(dir, "inspect --report " + dir.file("report.json") + " --mode delta --out " + dir.file("d.csv")).code, 0);

  auto loc = cli(dir, "localize --queries " + data("queries_eval.cvft") + " --refs " + data("refs.cvft") + " --geo " +
                          data("geo.csv") + " --ckpt " + dir.file("ckpt") + " --out " + dir.file("loc.csv"));
  ASSERT_EQ(loc.code, 0) << loc.err;
  EXPECT_EQ(first_line(dir.file("loc.csv")), "query_id,ref_id,lat,lon,similarity");
}

TEST_F(CliTest, RepeatedRunsAreByteIdentical) {
  std::string reports[2];
  for (int run = 0; run < 2; ++run) {
    auto out = dir.file("run" + std::to_string(run));
    ASSERT_EQ(cli(dir, "train --queries " + data("queries.cvft") + " --refs " + data("refs.cvft") + " --config " +
                           dir.file("train.json") + " --out " + out)
                  .code,
              0);
    ASSERT_EQ(cli(dir, "eval --queries " + data("queries_eval.cvft") + " --refs " + data("refs.cvft") + " --ckpt " +
                           out + " --gt " + data("gt_eval.csv") + " --out " + out + "/report.json")
                  .code,
              0);
    reports[run] = slurp(out + "/report.json");
  }
  EXPECT_FALSE(reports[0].empty());
  EXPECT_EQ(reports[0], reports[1]);
  EXPECT_EQ(slurp(dir.file("run0/adapter.cvad")), slurp(dir.file("run1/adapter.cvad")));
}

TEST_F(CliTest, MalformedConfigReportsLine) {
  write_text(dir.file("bad.json"), "{\n  \"T\": 5,\n  \"M\": ,\n}\n");
  auto r = cli(dir, "train --queries " + data("queries.cvft") + " --refs " + data("refs.cvft") + " --config " +
                        dir.file("bad.json") + " --out " + dir.file("ckpt"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("line 3"), std::string::npos) << r.err;
}

TEST_F(CliTest, InputErrorsExitWithTwo) {
  EXPECT_EQ(cli(dir, "eval --queries " + dir.file("nope.cvft") + " --refs " + data("refs.cvft") + " --gt " +
                         data("gt.csv") + " --out " + dir.file("r.json"))
                .code,
            2);
  EXPECT_EQ(cli(dir, "train --queries " + data("queries.cvft")).code, 2);
  EXPECT_EQ(cli(dir, "frobnicate").code, 2);
  fs::create_directories(dir.file("empty_maps"));
  auto pool = cli(dir, "pool --maps " + dir.file("empty_maps") + " --out " + dir.file("p.cvft"));
  EXPECT_EQ(pool.code, 2);
  EXPECT_NE(pool.err.find("no input maps"), std::string::npos) << pool.err;

  // Ground truth naming ids that do not exist is refused with the ids listed.
  write_text(dir.file("gt_bad.csv"), "query_id,ref_id\nzzz,r00000\n");
  auto gt = cli(dir, "eval --queries " + data("queries.cvft") + " --refs " + data("refs.cvft") + " --gt " +
                         dir.file("gt_bad.csv") + " --out " + dir.file("r.json"));
  EXPECT_EQ(gt.code, 2);
  EXPECT_NE(gt.err.find("zzz"), std::string::npos) << gt.err;
}

TEST_F(CliTest, CollapseExitsWithThree) {
  write_text(dir.file("collapse.json"), R"({"T": 20, "M": 40, "threshold": 0.9999})");
  auto r = cli(dir, "train --queries " + data("queries.cvft") + " --refs " + data("refs.cvft") + " --config " +
                        dir.file("collapse.json") + " --out " + dir.file("ckpt"));
  EXPECT_EQ(r.code, 3) << r.err;
  EXPECT_NE(r.err.find("collapsed"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir.file("ckpt/trainer.cvts")));
}

TEST_F(CliTest, PoolBuildsFeatureFileFromMaps) {
  fs::create_directories(dir.file("maps"));
  save_feature_map({2, 2, 3, std::vector<double>(12, 1.0)}, dir.file("maps/b.cvfm"));
  save_feature_map({1, 2, 3, {1, 2, 3, 4, 5, 6}}, dir.file("maps/a.cvfm"));
  auto r = cli(dir, "pool --maps " + dir.file("maps") + " --p 3 --view reference --out " + dir.file("pooled.cvft"));
  ASSERT_EQ(r.code, 0) << r.err;
  auto set = load_feature_set(dir.file("pooled.cvft"));
  EXPECT_EQ(set.ids, (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(set.view, View::Reference);
  EXPECT_TRUE(set.normalized);
  EXPECT_NEAR(set.data.row(1).norm(), 1.0, 1e-6);
}

TEST_F(CliTest, ResumeContinuesToTarget) {
  write_text(dir.file("t3.json"), R"({"T": 3, "M": 40, "seed": 1})");
  ASSERT_EQ(cli(dir, "train --queries " + data("queries.cvft") + " --refs " + data("refs.cvft") + " --config " +
                         dir.file("t3.json") + " --out " + dir.file("a"))
                .code,
            0);
  ASSERT_EQ(cli(dir, "train --queries " + data("queries.cvft") + " --refs " + data("refs.cvft") + " --config " +
                         dir.file("train.json") + " --out " + dir.file("a") + " --resume")
                .code,
            0);
  ASSERT_EQ(cli(dir, "train --queries " + data("queries.cvft") + " --refs " + data("refs.cvft") + " --config " +
                         dir.file("train.json") + " --out " + dir.file("b"))
                .code,
            0);
  EXPECT_EQ(slurp(dir.file("a/adapter.cvad")), slurp(dir.file("b/adapter.cvad")));
}

}  // namespace
}  // namespace cvadapt
