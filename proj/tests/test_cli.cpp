#include <gtest/gtest.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include <nlohmann/json.hpp>

#include "vtgrasp/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "vtgrasp_cli_test";

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

struct CliRun {
  int code;
  std::string out, err;
};

CliRun cli(const std::string& args) {
  fs::create_directories(kRoot);
  static int calls = 0;
  const std::string tag = std::to_string(getpid()) + "_" + std::to_string(calls++);
  const fs::path out = kRoot / ("stdout_" + tag), err = kRoot / ("stderr_" + tag);
  const std::string cmd = std::string(VTGRASP_CLI) + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  CliRun r{WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
  fs::remove(out);
  fs::remove(err);
  return r;
}

std::vector<json> lines(const std::string& text) {
  std::vector<json> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(json::parse(line));
  return out;
}

fs::path dir(const std::string& name) {
  const fs::path p = kRoot / name;
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(Cli, GenDataWritesClipsAndManifest) {
  const fs::path d = dir("slip200");
  const CliRun r = cli("gen-data --kind slip --count 200 --seed 42 --out " + d.string());
  ASSERT_EQ(r.code, 0) << r.err;
  std::size_t tensors = 0;
  for (const auto& e : fs::directory_iterator(d)) tensors += e.path().extension() == ".vtsf";
  EXPECT_EQ(tensors, 200u);
  EXPECT_EQ(lines(slurp(d / "manifest.jsonl")).size(), 200u);
  const auto out = lines(r.out);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0]["count"], 200);
  EXPECT_EQ(out[0]["positive"], 100);
}

TEST(Cli, GenDataIsByteIdentical) {
  const fs::path a = dir("same_a"), b = dir("same_b");
  ASSERT_EQ(cli("gen-data --kind touch --count 12 --seed 9 --out " + a.string()).code, 0);
  ASSERT_EQ(cli("gen-data --kind touch --count 12 --seed 9 --out " + b.string()).code, 0);
  for (const auto& e : fs::directory_iterator(a)) EXPECT_EQ(slurp(e.path()), slurp(b / e.path().filename()));
  const fs::path c = dir("other");
  ASSERT_EQ(cli("gen-data --kind touch --count 12 --seed 10 --out " + c.string()).code, 0);
  EXPECT_NE(slurp(a / "sample_000000.vtsf"), slurp(c / "sample_000000.vtsf"));
}

TEST(Cli, EpisodeWritesTrace) {
  const fs::path t = kRoot / "t.jsonl";
  fs::remove(t);
  const CliRun r = cli("episode --scenario fluid --seed 7 --trace " + t.string());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto trace = lines(slurp(t));
  ASSERT_GT(trace.size(), 2u);
  const json& summary = trace.back();
  EXPECT_TRUE(summary["summary"].get<bool>());
  EXPECT_TRUE(summary["state"] == "Done" || summary["state"] == "Failed");
  for (std::size_t i = 0; i + 1 < trace.size(); ++i) {
    for (const char* k : {"t", "state", "F_n", "F_cmd", "F_t", "touch", "slip", "slipping"}) ASSERT_TRUE(trace[i].contains(k));
  }
  const fs::path t2 = kRoot / "t2.jsonl";
  ASSERT_EQ(cli("episode --scenario fluid --seed 7 --trace " + t2.string()).code, 0);
  EXPECT_EQ(slurp(t), slurp(t2));
}

TEST(Cli, TrainThenEval) {
  const fs::path data = dir("train_data"), ckpt = dir("ckpt");
  ASSERT_EQ(cli("gen-data --kind slip --count 12 --seed 1 --out " + data.string()).code, 0);
  const fs::path cfg = kRoot / "tiny.json";
  std::ofstream(cfg) << R"({"model": {"hidden": 16, "heads": 2, "blocks": 1, "intermediate": 32}})";
  const CliRun t = cli("train --seed 3 --config " + cfg.string() + " --data " + data.string() + " --out " + ckpt.string() +
                    " --epochs 2 --batch 4");
  ASSERT_EQ(t.code, 0) << t.err;
  const auto metrics = lines(t.out);
  ASSERT_EQ(metrics.size(), 4u);  // epochs 0..2 plus the summary
  EXPECT_EQ(metrics[0]["event"], "epoch");
  EXPECT_EQ(metrics.back()["event"], "train-done");
  const CliRun e = cli("eval --checkpoint " + ckpt.string() + " --data " + data.string());
  ASSERT_EQ(e.code, 0) << e.err;
  const json res = lines(e.out).at(0);
  EXPECT_GE(res["accuracy"].get<double>(), 0.0);
  EXPECT_EQ(res["total"], 12);
  EXPECT_EQ(res["confusion"].size(), 2u);
  // the detector loader reads the same checkpoint
  EXPECT_EQ(vtgrasp::load_checkpoint(ckpt).kind(), vtgrasp::ModelKind::slip);
}

TEST(Cli, EvalGeometryMismatch) {
  const fs::path data = dir("touch_data"), ckpt = dir("slip_ckpt");
  ASSERT_EQ(cli("gen-data --kind touch --count 4 --out " + data.string()).code, 0);
  vtgrasp::save_checkpoint(ckpt, vtgrasp::Classifier(vtgrasp::SlipNet(vtgrasp::SlipNetConfig::toy(), 1)));
  const CliRun r = cli("eval --checkpoint " + ckpt.string() + " --data " + data.string());
  EXPECT_EQ(r.code, 1);
  const auto err = lines(r.err);
  ASSERT_EQ(err.size(), 1u);
  EXPECT_EQ(err[0]["error"], "geometry-mismatch");
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(cli("gen-data --kind slip --bogus 1 --out x").code, 2);
  EXPECT_EQ(cli("").code, 2);
  EXPECT_EQ(cli("frobnicate").code, 2);
  EXPECT_EQ(cli("--help").code, 0);
}

TEST(Cli, RuntimeErrorsAreOneLine) {
  const CliRun missing = cli("eval --checkpoint /nonexistent --data /nonexistent");
  EXPECT_EQ(missing.code, 1);
  ASSERT_EQ(lines(missing.err).size(), 1u);
  EXPECT_EQ(lines(missing.err)[0]["error"], "io");
  const fs::path bad = kRoot / "bad.json";
  std::ofstream(bad) << R"({"controller": {"force_step": -1}})";
  const CliRun cfg = cli("episode --config " + bad.string());
  EXPECT_EQ(cfg.code, 1);
  EXPECT_EQ(lines(cfg.err).at(0)["error"], "config");
}

TEST(Cli, BenchAndExport) {
  const CliRun b = cli("bench --kind slip --variants toy AB3-4 --repeats 1");
  ASSERT_EQ(b.code, 0) << b.err;
  const auto rows = lines(b.out);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[1]["blocks"], 4);
  EXPECT_EQ(rows[1]["hidden"], 768);
  EXPECT_GT(rows[1]["ms"].get<double>(), 0.0);
  const fs::path data = dir("export_data"), out = dir("pgm");
  ASSERT_EQ(cli("gen-data --kind slip --count 2 --out " + data.string()).code, 0);
  const CliRun e = cli("export-frames --data " + data.string() + " --out " + out.string() + " --index 1");
  ASSERT_EQ(e.code, 0) << e.err;
  EXPECT_EQ(lines(e.out).at(0)["files"], 8);
  EXPECT_TRUE(fs::exists(out / "sample_000001_f07.pgm"));
}
