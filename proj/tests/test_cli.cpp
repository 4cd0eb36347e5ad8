#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include "echoxflow/cli.hpp"
#include "support.hpp"

using namespace exfl;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int rc;
  std::string out, err;
};

CliRun exfl_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "exfl");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int rc = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {rc, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

/// Relative path -> contents for every file under `dir`.
std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> m;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) m[fs::relative(e.path(), dir).string()] = slurp(e.path());
  return m;
}

/// term -> value for one case of a task{N}_cases.csv.
std::map<std::string, std::string> case_terms(const fs::path& csv, const std::string& case_id) {
  std::map<std::string, std::string> m;
  std::istringstream in(slurp(csv));
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "case_id,task,term,value");
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
    if (f.size() == 4 && f[0] == case_id) m[f[2]] = f[3];
  }
  return m;
}

const std::vector<std::string> kSmall = {"--no-3d", "--no-stitching", "--beats", "2"};

std::vector<std::string> phantom_args(const fs::path& dir, std::vector<std::string> extra = kSmall) {
  std::vector<std::string> a = {"phantom", "-o", dir.string()};
  a.insert(a.end(), extra.begin(), extra.end());
  return a;
}

phantom::PhantomConfig small_config() {
  phantom::PhantomConfig c;
  c.include_3d = false;
  c.include_stitching = false;
  c.n_beats = 2;
  return c;
}

}  // namespace

TEST(Cli, UsageErrors) {
  EXPECT_EQ(exfl_cli({}).rc, 2);
  EXPECT_EQ(exfl_cli({"frobnicate"}).rc, 2);
  EXPECT_EQ(exfl_cli({"evaluate", "x", "-o", "y"}).rc, 2);  // --task missing
  EXPECT_EQ(exfl_cli({"evaluate", "x", "-o", "y", "--task", "4"}).rc, 2);
  EXPECT_EQ(exfl_cli({"folds", "x", "-o", "y", "--folds", "0"}).rc, 2);

  test::TempDir t;
  ::unsetenv(cli::kOutputEnv);
  const CliRun r = exfl_cli({"phantom"});
  EXPECT_EQ(r.rc, 2);
  EXPECT_NE(r.err.find("EXFL_OUTPUT_DIR"), std::string::npos);

  ::setenv(cli::kOutputEnv, (t / "env").c_str(), 1);
  EXPECT_EQ(exfl_cli({"phantom", "--no-3d", "--no-stitching", "--beats", "1"}).rc, 0);
  ::unsetenv(cli::kOutputEnv);
  EXPECT_TRUE(fs::exists(t / "env" / "exam.json"));
}

TEST(Cli, DataErrors) {
  test::TempDir t;
  EXPECT_EQ(exfl_cli({"inspect", (t / "missing").string()}).rc, 3);
  fs::create_directories(t / "empty");
  EXPECT_EQ(exfl_cli({"inspect", (t / "empty").string()}).rc, 3);

  ASSERT_EQ(exfl_cli(phantom_args(t / "ph")).rc, 0);
  const fs::path blob = t / "ph" / "tissue" / "stream_00_bmode2d.exfl";
  ASSERT_TRUE(fs::exists(blob)) << blob;
  std::string b = slurp(blob);
  b[0] = 'X';
  std::ofstream(blob, std::ios::binary | std::ios::trunc) << b;
  const CliRun r = exfl_cli({"inspect", (t / "ph").string()});
  EXPECT_EQ(r.rc, 3);
  EXPECT_NE(r.err.find("bad magic"), std::string::npos) << r.err;
}

TEST(Cli, SubcommandsAreIdempotent) {
  test::TempDir t;
  for (const char* k : {"a", "b"}) {
    const fs::path root = t / k;
    ASSERT_EQ(exfl_cli(phantom_args(root / "exam")).rc, 0);
    const std::string exam = (root / "exam").string();
    const CliRun ins = exfl_cli({"inspect", exam});
    ASSERT_EQ(ins.rc, 0) << ins.err;
    std::ofstream(root / "inspect.txt") << ins.out;
    ASSERT_EQ(exfl_cli({"convert", exam, "-o", (root / "convert").string(), "--size", "48"}).rc, 0);
    ASSERT_EQ(exfl_cli({"align", exam, "-o", (root / "align").string()}).rc, 0);
    ASSERT_EQ(exfl_cli({"rasterize", exam, "-o", (root / "rasterize").string(), "--size", "48"}).rc, 0);
    ASSERT_EQ(exfl_cli({"folds", exam, "-o", (root / "folds").string(), "--folds", "1"}).rc, 0);
    ASSERT_EQ(exfl_cli({"baseline", exam, "-o", (root / "baseline").string(), "--task", "1", "--size", "48"}).rc, 0);
    ASSERT_EQ(exfl_cli({"evaluate", exam, "-o", (root / "eval").string(), "--task", "2", "--size", "48", "--folds", "1"}).rc, 0);
  }
  const auto a = tree(t / "a"), b = tree(t / "b");
  EXPECT_GT(a.size(), 20u);
  ASSERT_EQ(a.size(), b.size());
  for (const auto& [k, v] : a) {
    ASSERT_TRUE(b.count(k)) << k;
    EXPECT_TRUE(v == b.at(k)) << k;
  }
  EXPECT_TRUE(std::any_of(a.begin(), a.end(), [](const auto& kv) { return kv.first.find("rpeaks.csv") != std::string::npos; }));
  EXPECT_TRUE(a.count("eval/task2_cases.csv"));
  EXPECT_TRUE(a.count("eval/task2_folds.csv"));
  EXPECT_EQ(a.at("folds/folds.csv"), "exam_id,patient_key,fold\nphantom-exam,P000,0\n");
}

TEST(Cli, StitchRefusesIrregularRhythm) {
  test::TempDir t;
  ASSERT_EQ(exfl_cli(phantom_args(t / "irr", {"--no-3d", "--rr-variation", "0.4"})).rc, 0);
  const CliRun r = exfl_cli({"stitch", (t / "irr").string(), "-o", (t / "s1").string()});
  EXPECT_EQ(r.rc, 4) << r.err;

  ASSERT_EQ(exfl_cli(phantom_args(t / "reg", {"--no-3d"})).rc, 0);
  const CliRun ok = exfl_cli({"stitch", (t / "reg").string(), "-o", (t / "s2").string()});
  EXPECT_EQ(ok.rc, 0) << ok.err;
  EXPECT_TRUE(is_recording_directory(t / "s2" / "phantom-exam" / "stitch"));
}

TEST(Cli, BaselineMatchesPhantomGroundTruth) {
  test::TempDir t;
  ASSERT_EQ(exfl_cli(phantom_args(t / "exam")).rc, 0);
  const auto ex = phantom::generate_exam(small_config());
  const auto& gt = ex.truth;
  const std::size_t size = 64;
  const ScanConverter2D conv(gt.geometry, default_grid_for(gt.geometry, size));
  const auto tg = phantom::phantom_targets(gt, phantom::Domain::cartesian, size);

  for (std::string domain : {"beamspace", "cartesian"}) {
    phantom::PhantomPrediction p;
    if (domain == "cartesian") {
      p = {temporal_mean_baseline(tg.tissue_velocity), temporal_mean_baseline(tg.color_velocity),
           temporal_mean_baseline(tg.color_power), temporal_mean_baseline(tg.color_variation)};
    } else {
      const Tensor<float> s = turbulence_proxy(gt.color_velocity_stored);
      p = {conv.convert_series(temporal_mean_baseline(gt.tissue_velocity_stored)),
           conv.convert_series(temporal_mean_baseline(gt.color_velocity_stored)),
           conv.convert_series(temporal_mean_baseline(gt.color_power_stored)),
           conv.convert_series(temporal_mean_baseline(s))};
    }
    const auto want = phantom::ground_truth_loss(gt, p, phantom::Domain::cartesian, size);
    ASSERT_TRUE(want.task2_velocity);

    for (int task : {1, 2}) {
      const fs::path o = t / (domain + std::to_string(task));
      const CliRun r = exfl_cli({"evaluate", (t / "exam").string(), "-o", o.string(), "--task", std::to_string(task),
                              "--domain", domain, "--size", std::to_string(size), "--folds", "1"});
      ASSERT_EQ(r.rc, 0) << r.err;
      const std::string id = task == 1 ? "phantom-exam/tissue" : "phantom-exam/color";
      const auto terms = case_terms(o / ("task" + std::to_string(task) + "_cases.csv"), id);
      if (task == 1) {
        ASSERT_TRUE(terms.count("alias_l1"));
        EXPECT_NEAR(std::stod(terms.at("alias_l1")), want.task1, 1e-9) << domain;
      } else {
        EXPECT_NEAR(std::stod(terms.at("power")), want.task2_power, 1e-9) << domain;
        EXPECT_NEAR(std::stod(terms.at("velocity")), *want.task2_velocity, 1e-9) << domain;
        EXPECT_NEAR(std::stod(terms.at("variation")), *want.task2_variation, 1e-9) << domain;
      }
    }
  }
}

TEST(Cli, PredictionDirectories) {
  test::TempDir t;
  ASSERT_EQ(exfl_cli(phantom_args(t / "exam")).rc, 0);
  const std::string exam = (t / "exam").string();

  // Baseline written to disk scores the same as the in-process baseline.
  ASSERT_EQ(exfl_cli({"baseline", exam, "-o", (t / "bl").string(), "--task", "2", "--size", "40"}).rc, 0);
  ASSERT_EQ(exfl_cli({"evaluate", exam, "-o", (t / "e1").string(), "--task", "2", "--size", "40"}).rc, 0);
  ASSERT_EQ(exfl_cli({"evaluate", exam, "-o", (t / "e2").string(), "--task", "2", "--size", "40", "--pred",
                      (t / "bl").string()}).rc, 0);
  EXPECT_EQ(slurp(t / "e1" / "task2_cases.csv"), slurp(t / "e2" / "task2_cases.csv"));

  // Grid mismatch is a data error.
  EXPECT_EQ(exfl_cli({"evaluate", exam, "-o", (t / "e3").string(), "--task", "2", "--size", "41", "--pred",
                      (t / "bl").string()}).rc, 3);

  // The stored tissue recording is a perfect beamspace prediction.
  const fs::path pred = t / "pred" / "phantom-exam" / "tissue";
  fs::create_directories(pred.parent_path());
  fs::copy(t / "exam" / "tissue", pred, fs::copy_options::recursive);
  const std::vector<std::string> base = {"evaluate", exam, "-o", (t / "e4").string(), "--task", "1", "--size", "40",
                                         "--pred", (t / "pred").string()};
  const CliRun refused = exfl_cli(base);
  EXPECT_EQ(refused.rc, 4);
  EXPECT_NE(refused.err.find("--convert-predictions"), std::string::npos) << refused.err;
  auto with = base;
  with.push_back("--convert-predictions");
  const CliRun ok = exfl_cli(with);
  ASSERT_EQ(ok.rc, 0) << ok.err;
  EXPECT_EQ(std::stod(case_terms(t / "e4" / "task1_cases.csv", "phantom-exam/tissue").at("alias_l1")), 0.0);

  // Missing prediction recording.
  fs::remove_all(pred);
  EXPECT_EQ(exfl_cli(with).rc, 3);
}

TEST(Cli, FoldsGroupPatients) {
  test::TempDir t;
  const char* patients[] = {"A", "B", "A", "C", "B", "D"};
  for (int i = 0; i < 6; ++i) {
    ASSERT_EQ(exfl_cli(phantom_args(t / "all" / ("e" + std::to_string(i)),
                                    {"--no-3d", "--no-stitching", "--beats", "1", "--exam-id", "e" + std::to_string(i),
                                     "--patient", patients[i]}))
                  .rc,
              0);
  }
  const CliRun r = exfl_cli({"folds", (t / "all").string(), "-o", (t / "f").string(), "--folds", "3", "--seed", "11"});
  ASSERT_EQ(r.rc, 0) << r.err;
  std::map<std::string, std::string> fold_of_patient;
  std::istringstream in(r.out);
  std::string line;
  std::getline(in, line);
  int rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    std::stringstream ss(line);
    std::string exam, pk, fold;
    std::getline(ss, exam, ',');
    std::getline(ss, pk, ',');
    std::getline(ss, fold, ',');
    if (fold_of_patient.count(pk)) {
      EXPECT_EQ(fold_of_patient[pk], fold) << pk;
    }
    fold_of_patient[pk] = fold;
  }
  EXPECT_EQ(rows, 6);
  EXPECT_EQ(fold_of_patient.size(), 4u);
}
