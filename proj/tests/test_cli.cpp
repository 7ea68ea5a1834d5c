#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "rdpd/checkpoint.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  int code = -1;
  std::string output;
};

Run run(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + (env.empty() ? "" : " ") + std::string(RDPD_CLI_PATH) + " " + args + " 2>&1";
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  while (std::fgets(buf, sizeof buf, pipe)) r.output += buf;
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const std::string kManifest = std::string(RDPD_SAMPLES_DIR) + "/activity/manifest.json";
const std::string kData = "--manifest " + kManifest + " --group wrist";

class Cli : public ::testing::Test {
 protected:
  static fs::path dir;

  static void SetUpTestSuite() {
    dir = fs::temp_directory_path() / ("rdpd_cli_test_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    const auto r = run("train-teacher " + kData + " --iterations 3 --out " + (dir / "teacher").string());
    ASSERT_EQ(r.code, 0) << r.output;
  }

  static void TearDownTestSuite() { fs::remove_all(dir); }

  static std::string teacher() { return (dir / "teacher").string(); }
  static std::string bundle() { return teacher() + "/bundle.json"; }
};

fs::path Cli::dir;

fs::path first_with(const fs::path& d, const std::string& ext) {
  std::vector<fs::path> found;
  for (const auto& e : fs::directory_iterator(d)) {
    if (e.path().extension() == ext) found.push_back(e.path());
  }
  std::sort(found.begin(), found.end());
  return found.empty() ? fs::path() : found.front();
}

}  // namespace

TEST_F(Cli, HelpListsModeMapping) {
  const auto r = run("--help");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.output.find("rdpd-r2   L_att + L_hard + L_soft"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("direct    L_hard"), std::string::npos);
  EXPECT_NE(r.output.find("DISTILL_PRECISION"), std::string::npos);
}

TEST_F(Cli, MissingManifestIsAConfigError) {
  const auto r = run("train-teacher --manifest /nonexistent/manifest.json --group wrist --out " +
                     (dir / "none").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("manifest not found"), std::string::npos) << r.output;
}

TEST_F(Cli, UnknownFlagsAndBadPrecisionAreRejected) {
  EXPECT_EQ(run("train-teacher --bogus").code, 2);
  const auto r = run("train-teacher " + kData + " --out " + (dir / "p16").string(), "DISTILL_PRECISION=16");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("DISTILL_PRECISION"), std::string::npos);
}

TEST_F(Cli, TeacherWritesCheckpointBundleAndLogs) {
  for (const char* f : {"teacher.ckpt", "bundle.json", "teacher_log.jsonl", "teacher_log.txt",
                        "teacher_eval.json", "teacher_eval.txt", "run.json"}) {
    EXPECT_TRUE(fs::exists(fs::path(teacher()) / f)) << f;
  }
  const auto record = json::parse(slurp(fs::path(teacher()) / "run.json"));
  EXPECT_EQ(record["data"]["group"], "wrist");
  EXPECT_EQ(record["config"]["max_iterations"], 3);
  EXPECT_EQ(rdpd::checkpoint_precision(fs::path(teacher()) / "teacher.ckpt"), 32u);
  std::istringstream log(slurp(fs::path(teacher()) / "teacher_log.jsonl"));
  std::string line;
  int n = 0;
  while (std::getline(log, line)) {
    const auto e = json::parse(line);
    EXPECT_TRUE(e.contains("L_att") && e.contains("L_total") && e.contains("valid_metric")) << line;
    ++n;
  }
  EXPECT_EQ(n, 3);
}

TEST_F(Cli, DirectRefusesABundle) {
  const auto r = run("train-student " + kData + " --mode direct --bundle " + bundle() + " --out " +
                     (dir / "direct_b").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("--bundle"), std::string::npos) << r.output;
}

TEST_F(Cli, DistillingModesRequireABundle) {
  const auto r = run("train-student " + kData + " --mode rdpd --out " + (dir / "rdpd_nb").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("requires --bundle"), std::string::npos) << r.output;
}

TEST_F(Cli, StudentEmitsPerSeedAndSummaryRows) {
  const auto out = dir / "students";
  const auto r = run("train-student " + kData + " --mode rdpd --bundle " + bundle() + " --teacher " +
                     teacher() + "/teacher.ckpt --iterations 2 --seeds 0-2 --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.output;
  const auto j = json::parse(slurp(out / "results.json"));
  ASSERT_EQ(j["cells"].size(), 3u);
  EXPECT_EQ(j["summary"].size(), 1u);
  EXPECT_EQ(j["summary"][0]["n"], 3);
  EXPECT_EQ(j["cells"][2]["seed"], 2);
  EXPECT_GT(j["cells"][0]["attention_kl"].get<double>(), 0.0);
  EXPECT_TRUE(fs::exists(out / "results.txt"));
  EXPECT_NE(first_with(out, ".ckpt"), fs::path());
}

TEST_F(Cli, EvalReproducesTrainingTimeResult) {
  const auto out = dir / "for_eval";
  ASSERT_EQ(run("train-student " + kData + " --mode kd --bundle " + bundle() +
                " --iterations 2 --seeds 4 --out " + out.string()).code, 0);
  const auto ckpt = first_with(out, ".ckpt");
  const auto r = run("eval --manifest " + kManifest + " --ckpt " + ckpt.string() + " --out " +
                     (dir / "eval").string());
  ASSERT_EQ(r.code, 0) << r.output;
  const auto trained = json::parse(slurp(out / "results.json"))["cells"][0]["eval"];
  const auto again = json::parse(slurp(dir / "eval" / "eval.json"));
  EXPECT_EQ(again, trained);

  // The text table carries the same macro numbers to six decimals.
  const auto text = slurp(dir / "eval" / "eval.txt");
  const auto pos = text.find("macro");
  ASSERT_NE(pos, std::string::npos);
  std::istringstream row(text.substr(pos));
  std::string name, bar;
  double support, roc, pr;
  row >> name >> bar >> support >> bar >> roc >> bar >> pr;
  EXPECT_NEAR(roc, again["roc_auc"].get<double>(), 5e-7);
  EXPECT_NEAR(pr, again["pr_auc"].get<double>(), 5e-7);
}

TEST_F(Cli, EvalRejectsUnknownSplitAndCorruptCheckpoint) {
  const auto r = run("eval " + kData + " --ckpt " + teacher() + "/teacher.ckpt --split holdout");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("unknown split"), std::string::npos);
  const auto bad = dir / "bad.ckpt";
  auto bytes = slurp(fs::path(teacher()) / "teacher.ckpt");
  bytes[bytes.size() / 2] ^= 0x20;
  std::ofstream(bad, std::ios::binary) << bytes;
  const auto c = run("eval " + kData + " --ckpt " + bad.string());
  EXPECT_EQ(c.code, 3);
  EXPECT_NE(c.output.find("checksum"), std::string::npos) << c.output;
}

TEST_F(Cli, DumpAttentionRowsAreDistributions) {
  const auto out = dir / "dump_students";
  ASSERT_EQ(run("train-student " + kData + " --mode rdpd-r2 --bundle " + bundle() +
                " --iterations 2 --out " + out.string()).code, 0);
  const auto student = first_with(out, ".ckpt");
  const auto r = run("dump-attention " + kData + " --ckpt " + teacher() + "/teacher.ckpt " +
                     student.string() + " --first 4 --out " + (dir / "dump").string());
  ASSERT_EQ(r.code, 0) << r.output;
  const auto rows = json::parse(slurp(dir / "dump" / "attention.json"));
  ASSERT_EQ(rows.size(), 8u);
  for (const auto& row : rows) {
    double a = 0, p = 0;
    for (double v : row["attention"]) a += v;
    for (double v : row["probs"]) p += v;
    EXPECT_NEAR(a, 1.0, 1e-6);
    EXPECT_NEAR(p, 1.0, 1e-6);
  }
  EXPECT_EQ(rows[0]["model"], "teacher");
  EXPECT_EQ(rows[0]["sample_id"], rows[1]["sample_id"]);
}

TEST_F(Cli, NoiseSweepRowCount) {
  const auto out = dir / "noise";
  const auto r = run("sweep " + kData + " --sweep noise-amp --values 0 0.5 1 2 --modes direct,rdpd"
                     " --seeds 0-1 --iterations 1 --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.output;
  const auto lines = slurp(out / "cells.jsonl");
  EXPECT_EQ(std::count(lines.begin(), lines.end(), '\n'), 4 * 2 * 2);
  EXPECT_EQ(json::parse(slurp(out / "summary.json")).size(), 8u);
}

TEST_F(Cli, RichFractionSweepKeepsEvaluationSplits) {
  const auto out = dir / "fraction";
  ASSERT_EQ(run("sweep " + kData + " --sweep rich-fraction --values 0.5 1 --modes direct,kd"
                " --iterations 1 --out " + out.string()).code, 0);
  std::istringstream in(slurp(out / "cells.jsonl"));
  std::string line, hash;
  int n = 0;
  while (std::getline(in, line)) {
    const auto c = json::parse(line);
    if (hash.empty()) hash = c["eval_data_hash"];
    EXPECT_EQ(c["eval_data_hash"], hash);
    ++n;
  }
  EXPECT_EQ(n, 4);
}

TEST_F(Cli, TemperatureSweepReportsBothAucs) {
  const auto out = dir / "temperature";
  ASSERT_EQ(run("sweep " + kData + " --sweep temperature --values 1 5 --modes kd --iterations 1 --out " +
                out.string()).code, 0);
  const auto header = slurp(out / "cells.txt").substr(0, 120);
  EXPECT_NE(header.find("roc_auc"), std::string::npos);
  EXPECT_NE(header.find("pr_auc"), std::string::npos);
  std::istringstream in(slurp(out / "cells.jsonl"));
  std::string line;
  std::vector<double> values;
  while (std::getline(in, line)) values.push_back(json::parse(line)["value"]);
  EXPECT_EQ(values, (std::vector<double>{1, 5}));
}

TEST_F(Cli, IdenticalRunsAreByteIdentical) {
  for (const char* p : {"32", "64"}) {
    const std::string env = std::string("DISTILL_PRECISION=") + p;
    const auto a = dir / (std::string("det_a") + p), b = dir / (std::string("det_b") + p);
    const std::string args = "train-student " + kData + " --mode rdpd --bundle " + bundle() +
                             " --iterations 2 --seeds 3 --out ";
    ASSERT_EQ(run(args + a.string(), env).code, 0);
    ASSERT_EQ(run(args + b.string(), env).code, 0);
    EXPECT_EQ(slurp(a / "results.json"), slurp(b / "results.json"));
    const auto ca = first_with(a, ".ckpt"), cb = first_with(b, ".ckpt");
    EXPECT_EQ(ca.filename(), cb.filename());
    EXPECT_EQ(slurp(ca), slurp(cb));
    EXPECT_EQ(rdpd::checkpoint_precision(ca), std::string(p) == "64" ? 64u : 32u);
    const auto log = ca.stem().string() + "_log.jsonl";
    EXPECT_EQ(slurp(a / log), slurp(b / log));
  }
}

TEST_F(Cli, SynthRunsWithoutFiles) {
  const auto out = dir / "synth";
  const auto r = run("train-teacher --synth --iterations 1 --filters 8 --hidden 8 --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.output;
  const auto record = json::parse(slurp(out / "run.json"));
  EXPECT_TRUE(record["data"].contains("synth"));
  EXPECT_EQ(record["config"]["temperature"], 2.5);
}
