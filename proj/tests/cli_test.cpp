#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <sys/wait.h>

#include "sgp/data.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("sgp_cli_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Result run_cli(const std::string& args, const std::string& env = "") {
  static int counter = 0;
  const auto base = fs::temp_directory_path() / ("sgp_cli_capture_" + std::to_string(counter++));
  const std::string cmd = env + (env.empty() ? "" : " ") + SGP_CLI_PATH + " " + args + " >" + base.string() +
                          ".out 2>" + base.string() + ".err";
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(base.string() + ".out");
  r.err = slurp(base.string() + ".err");
  fs::remove(base.string() + ".out");
  fs::remove(base.string() + ".err");
  return r;
}

std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = slurp(e.path());
  return files;
}

std::size_t count_lines(const std::string& s) {
  std::size_t n = 0;
  for (char c : s) n += c == '\n';
  return n;
}

void write_file(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

const char* kTinyConfig =
    "model.dim=8\nmodel.blocks=1\nmodel.skip_channels=4\nmodel.up_channels=4\nlora.rank=2\nlora.alpha=2\n"
    "support.k=2\ntrain.steps=12\ntrain.eval_every=4\nseed=3\n";

// A small two-class corpus plus a trained run, shared by the tests below.
class TrainedRun : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = scratch("trained");
    auto g = run_cli("gen-data --kind shapes2d --n 16 --size 16 --classes 2 --support 2 --seed 5 --out " +
                 (dir_ / "data").string());
    ASSERT_EQ(g.code, 0) << g.err;
    write_file(dir_ / "cfg.txt", kTinyConfig);
    auto t = run_cli("train --data " + (dir_ / "data").string() + " --config " + (dir_ / "cfg.txt").string() +
                 " --set train.lr=0.01 --out " + (dir_ / "run").string());
    ASSERT_EQ(t.code, 0) << t.err;
  }
  static fs::path dir_;
};
fs::path TrainedRun::dir_;

}  // namespace

TEST(CliGenData, ReferenceCorpusManifestHas104Lines) {
  auto dir = scratch("gen104");
  auto r = run_cli("gen-data --kind shapes2d --n 104 --size 64 --classes 1 --seed 7 --out " + (dir / "d").string());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(count_lines(slurp(dir / "d" / "manifest.txt")), 104u);
  auto meta = slurp(dir / "d" / "meta.txt");
  EXPECT_NE(meta.find("classes=1"), std::string::npos);
  EXPECT_NE(meta.find("hw=64"), std::string::npos);
  EXPECT_NE(meta.find("seed=7"), std::string::npos);
  fs::remove_all(dir);
}

TEST(CliGenData, MissingOutIsUsageError) {
  auto r = run_cli("gen-data --kind shapes2d --n 4");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("--out"), std::string::npos);
  EXPECT_NE(r.err.find("Usage"), std::string::npos);
}

TEST(CliGenData, BadFlagsAreUsageErrors) {
  auto dir = scratch("badflags");
  EXPECT_EQ(run_cli("gen-data --kind cubes --out " + dir.string()).code, 2);
  EXPECT_EQ(run_cli("gen-data --n many --out " + dir.string()).code, 2);
  EXPECT_EQ(run_cli("gen-data --kind tubes3d --depth 2 --out " + dir.string()).code, 2);
  EXPECT_EQ(run_cli("gen-data --n 6 --support 4 --out " + dir.string()).code, 2);
  EXPECT_EQ(run_cli("").code, 2);
  EXPECT_EQ(run_cli("frobnicate").code, 2);
  fs::remove_all(dir);
}

TEST(CliGenData, RerunIsByteIdentical) {
  auto dir = scratch("rerun");
  for (const char* kind : {"shapes2d", "tubes3d"}) {
    const std::string flags = std::string("gen-data --kind ") + kind + " --n 12 --size 16 --depth 5 --seed 9 --out ";
    ASSERT_EQ(run_cli(flags + (dir / "a").string()).code, 0);
    ASSERT_EQ(run_cli(flags + (dir / "b").string()).code, 0);
    EXPECT_EQ(tree(dir / "a"), tree(dir / "b")) << kind;
    fs::remove_all(dir / "a");
    fs::remove_all(dir / "b");
  }
  fs::remove_all(dir);
}

TEST_F(TrainedRun, ArtifactsAndLog) {
  EXPECT_TRUE(fs::exists(dir_ / "run" / "ckpt" / "manifest.txt"));
  EXPECT_TRUE(fs::exists(dir_ / "run" / "ckpt" / "config.txt"));
  auto csv = slurp(dir_ / "run" / "metrics.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "step,split,class,dice,iou,loss_total,loss_dice,loss_ce,loss_kl,fallback_box_count");
  // 12 train rows and 3 evaluations of (2 classes + mean).
  EXPECT_EQ(count_lines(csv), 1u + 12u + 9u);
}

TEST_F(TrainedRun, TrainRerunIsByteIdentical) {
  auto again = dir_ / "run2";
  auto t = run_cli("train --data " + (dir_ / "data").string() + " --config " + (dir_ / "cfg.txt").string() +
               " --set train.lr=0.01 --out " + again.string());
  ASSERT_EQ(t.code, 0) << t.err;
  EXPECT_EQ(tree(dir_ / "run"), tree(again));
  fs::remove_all(again);
}

TEST_F(TrainedRun, EvalReproducesLoggedBestDice) {
  auto summary = slurp(dir_ / "run" / "summary.txt");
  const double best = std::stod(summary.substr(summary.find("best_dice=") + 10));
  auto r = run_cli("eval --data " + (dir_ / "data").string() + " --ckpt " + (dir_ / "run").string() +
               " --split test --metrics " + (dir_ / "eval.csv").string());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("mean dice "), std::string::npos);
  auto csv = slurp(dir_ / "eval.csv");
  auto row = csv.find("0,test,mean,");
  ASSERT_NE(row, std::string::npos) << csv;
  EXPECT_NEAR(std::stod(csv.substr(row + 12)), best, 1e-6);

  // evaluate is pure: the same checkpoint gives the same report.
  auto again = run_cli("eval --data " + (dir_ / "data").string() + " --ckpt " + (dir_ / "run" / "ckpt").string() +
                   " --split test");
  EXPECT_EQ(again.out, r.out);
}

TEST_F(TrainedRun, PredictWritesOnePreviewPerClass) {
  auto out = dir_ / "pred";
  auto r = run_cli("predict --data " + (dir_ / "data").string() + " --ckpt " + (dir_ / "run").string() +
               " --index 3 --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.err;
  std::size_t pgm = 0;
  for (const auto& e : fs::directory_iterator(out)) pgm += e.path().extension() == ".pgm";
  EXPECT_EQ(pgm, 2u);
  auto img = slurp(out / "class_0.pgm");
  EXPECT_EQ(img.substr(0, 13), "P5\n16 16\n255\n");
  EXPECT_EQ(img.size(), 13u + 256u);
  EXPECT_TRUE(fs::exists(out / "prediction.sgt"));
  auto boxes = slurp(out / "bbox.txt");
  EXPECT_EQ(count_lines(boxes), 1u + 2u);

  auto out2 = dir_ / "pred2";
  ASSERT_EQ(run_cli("predict --data " + (dir_ / "data").string() + " --ckpt " + (dir_ / "run").string() +
                " --index 3 --out " + out2.string())
                .code,
            0);
  EXPECT_EQ(tree(out), tree(out2));
  EXPECT_EQ(run_cli("predict --data " + (dir_ / "data").string() + " --ckpt " + (dir_ / "run").string() +
                " --index 99 --out " + out2.string())
                .code,
            2);
}

TEST_F(TrainedRun, UnreadableCheckpointIsIoError) {
  auto r = run_cli("eval --data " + (dir_ / "data").string() + " --ckpt " + (dir_ / "absent").string());
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("absent"), std::string::npos);

  auto broken = dir_ / "broken";
  fs::copy(dir_ / "run" / "ckpt", broken, fs::copy_options::recursive);
  std::string victim;
  for (const auto& e : fs::directory_iterator(broken))
    if (e.path().extension() == ".sgt") victim = e.path().filename().string();
  ASSERT_FALSE(victim.empty());
  write_file(broken / victim, "garbage");
  auto p = run_cli("predict --data " + (dir_ / "data").string() + " --ckpt " + broken.string() + " --index 0 --out " +
               (dir_ / "p").string());
  EXPECT_EQ(p.code, 3);
  EXPECT_NE(p.err.find(victim), std::string::npos) << p.err;
  fs::remove_all(broken);
}

TEST_F(TrainedRun, ConfigAndSplitErrorsAreUsageErrors) {
  write_file(dir_ / "bad.txt", "model.width=3\n");
  auto r = run_cli("train --data " + (dir_ / "data").string() + " --config " + (dir_ / "bad.txt").string() + " --out " +
               (dir_ / "x").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("model.width"), std::string::npos);
  EXPECT_EQ(run_cli("eval --data " + (dir_ / "data").string() + " --ckpt " + (dir_ / "run").string() + " --split val").code,
            2);
  EXPECT_EQ(run_cli("train --data " + (dir_ / "nodata").string() + " --out " + (dir_ / "x").string()).code, 3);
}

TEST_F(TrainedRun, NonFiniteTrainingIsNumericError) {
  auto r = run_cli("train --data " + (dir_ / "data").string() + " --config " + (dir_ / "cfg.txt").string() +
               " --set train.lr=1e38 --out " + (dir_ / "nan").string());
  EXPECT_EQ(r.code, 4);
  EXPECT_NE(r.err.find("grad norms"), std::string::npos) << r.err;
}

TEST_F(TrainedRun, AblationStudies) {
  const std::string common = " --data " + (dir_ / "data").string() + " --config " + (dir_ / "cfg.txt").string();
  EXPECT_EQ(run_cli("ablate --study bogus" + common + " --out " + (dir_ / "ab").string()).code, 2);

  auto c = run_cli("ablate --study components" + common + " --out " + (dir_ / "comp").string(), "SGP_THREADS=2");
  ASSERT_EQ(c.code, 0) << c.err;
  auto runs = slurp(dir_ / "comp" / "runs.csv");
  EXPECT_EQ(count_lines(runs), 1u + 9u);
  for (const char* v : {"pmg_off", "mem3d_off", "full"})
    for (int s = 3; s < 6; ++s)
      EXPECT_NE(runs.find(std::string("components,") + v + "," + std::to_string(s) + ","), std::string::npos) << v;
  auto summary = slurp(dir_ / "comp" / "summary.csv");
  EXPECT_EQ(summary.substr(0, summary.find('\n')), "study,variant,seeds,mean_dice,std_dice,mean_best_dice,std_best_dice");
  EXPECT_EQ(count_lines(summary), 1u + 3u);
  EXPECT_TRUE(fs::exists(dir_ / "comp" / "verdict.txt"));

  // Worker count does not change any artifact.
  auto c1 = run_cli("ablate --study components" + common + " --out " + (dir_ / "comp1").string(), "SGP_THREADS=1");
  ASSERT_EQ(c1.code, 0);
  EXPECT_EQ(tree(dir_ / "comp"), tree(dir_ / "comp1"));

  auto s = run_cli("ablate --study support-size --sizes 1,2,4" + common + " --out " + (dir_ / "size").string());
  ASSERT_EQ(s.code, 0) << s.err;
  EXPECT_EQ(count_lines(slurp(dir_ / "size" / "runs.csv")), 1u + 9u);
  auto ssum = slurp(dir_ / "size" / "summary.csv");
  for (const char* v : {"k1", "k2", "k4"}) EXPECT_NE(ssum.find(std::string("support-size,") + v + ",3,"), std::string::npos);

  EXPECT_EQ(run_cli("ablate --study support-size --sizes 1,x" + common + " --out " + (dir_ / "size").string()).code, 2);
  EXPECT_EQ(run_cli("ablate --study support-size --sizes 1,500" + common + " --out " + (dir_ / "size").string()).code, 2);
}

TEST(CliGradcheck, FullSuitePasses) {
  auto r = run_cli("gradcheck");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("path.pmg_total_loss"), std::string::npos);
  EXPECT_NE(r.out.find("path.pma_total_loss"), std::string::npos);
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
}

// A corpus of one image that is its own support and test sample; training drives
// the checkpoint to a perfect mask.
TEST(CliEval, PerfectFixturePrintsUnitDice) {
  auto dir = scratch("perfect");
  auto ds = sgp::data::gen_shapes2d(1, 32, 1, 7);
  ds.support = ds.query = ds.test = {0};
  sgp::data::write_dataset(ds, dir / "data");
  write_file(dir / "cfg.txt", "support.k=1\ntrain.steps=300\ntrain.eval_every=10\n");
  auto t = run_cli("train --data " + (dir / "data").string() + " --config " + (dir / "cfg.txt").string() + " --out " +
               (dir / "run").string());
  ASSERT_EQ(t.code, 0) << t.err;
  auto r = run_cli("eval --data " + (dir / "data").string() + " --ckpt " + (dir / "run").string() + " --split test");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("mean dice 1.0000"), std::string::npos) << r.out;
  fs::remove_all(dir);
}
