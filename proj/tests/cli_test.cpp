#include <gtest/gtest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "json.hpp"
#include "r2e/instance.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

fs::path work_dir() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "r2e_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string w(const std::string& name) { return (work_dir() / name).string(); }

Run run(const std::string& args) {
  const std::string log = w("last_output.txt");
  const std::string cmd = std::string(R2E_CLI_PATH) + " " + args + " > " + log + " 2>&1";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  std::ostringstream ss;
  ss << in.rdbuf();
  r.out = ss.str();
  return r;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t line_count(const std::string& path) {
  std::ifstream in(path);
  std::size_t n = 0;
  for (std::string l; std::getline(in, l);) n += !l.empty();
  return n;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string part; std::getline(ss, part, sep);) out.push_back(part);
  return out;
}

}  // namespace

TEST(Cli, GenerateWritesRequestedLines) {
  auto r = run("generate --family cluster --n 50 --count 10 --out " + w("c.jsonl"));
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(line_count(w("c.jsonl")), 10u);
  auto insts = r2e::read_dataset(w("c.jsonl"));
  EXPECT_EQ(insts[0].customers(), 50u);
  EXPECT_EQ(insts[0].dist_label, r2e::Distribution::cluster);
}

TEST(Cli, GenerateIsDeterministic) {
  ASSERT_EQ(run("generate --family mixed --n 12 --count 5 --problem cvrp --seed 4 --out " + w("a.jsonl")).code, 0);
  ASSERT_EQ(run("generate --family mixed --n 12 --count 5 --problem cvrp --seed 4 --out " + w("b.jsonl")).code, 0);
  EXPECT_EQ(r2e::file_checksum(w("a.jsonl")), r2e::file_checksum(w("b.jsonl")));
}

TEST(Cli, UnknownFamilyExitsTwoWithValidList) {
  auto r = run("generate --family spiral --out " + w("x.jsonl"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("uniform, cluster, mixed, explosion, expansion, grid, implosion"), std::string::npos) << r.out;
}

TEST(Cli, UnknownFlagExitsTwo) { EXPECT_EQ(run("generate --colour blue").code, 2); }

TEST(Cli, MalformedConfigNamesField) {
  std::ofstream(w("bad.json")) << R"({"preset": "tiny", "batchsize": 4})";
  auto r = run("train --config " + w("bad.json") + " --out " + w("bad_run"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("batchsize"), std::string::npos) << r.out;
}

TEST(Cli, TrainAndEvaluateCheckpoint) {
  auto r = run("train --preset tiny --epochs 2 --workers 1 --no-wall-clock --out " + w("run"));
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(line_count(w("run/metrics.csv")), 3u);
  ASSERT_TRUE(fs::exists(w("run/ckpt_2")));
  auto r2 = run("train --preset tiny --epochs 2 --workers 2 --no-wall-clock --out " + w("run2"));
  ASSERT_EQ(r2.code, 0) << r2.out;
  EXPECT_EQ(slurp(w("run/metrics.csv")), slurp(w("run2/metrics.csv")));

  ASSERT_EQ(run("generate --n 6 --count 4 --seed 3 --out " + w("tsp6.jsonl")).code, 0);
  auto e = run("eval --checkpoint " + w("run/ckpt_2") + " --dataset " + w("tsp6.jsonl") + " --oracle --out " +
               w("eval.csv"));
  ASSERT_EQ(e.code, 0) << e.out;
  auto lines = split(slurp(w("eval.csv")), '\n');
  ASSERT_GE(lines.size(), 2u);
  EXPECT_EQ(lines[0], "avg_obj,avg_gap,total_seconds");
  EXPECT_GE(std::stod(split(lines[1], ',')[1]), -1e-12);
  EXPECT_EQ(line_count(w("eval_instances.csv")), 5u);
}

TEST(Cli, EvalReferenceToursGiveZeroGap) {
  ASSERT_EQ(run("generate --n 7 --count 6 --seed 8 --out " + w("ref.jsonl")).code, 0);
  auto a = run("eval --untrained --preset tiny --dataset " + w("ref.jsonl") + " --oracle --write-reference-tours " +
               w("ref_tours.jsonl") + " --out " + w("e1.csv"));
  ASSERT_EQ(a.code, 0) << a.out;
  auto b = run("eval --tours " + w("ref_tours.jsonl") + " --dataset " + w("ref.jsonl") + " --oracle --out " + w("e2.csv"));
  ASSERT_EQ(b.code, 0) << b.out;
  auto row = split(split(slurp(w("e2.csv")), '\n')[1], ',');
  EXPECT_EQ(std::stod(row[1]), 0.0);
}

TEST(Cli, EvalWithoutReferenceExitsTwo) {
  ASSERT_EQ(run("generate --n 6 --count 2 --out " + w("noref.jsonl")).code, 0);
  EXPECT_EQ(run("eval --untrained --preset tiny --dataset " + w("noref.jsonl") + " --out " + w("e3.csv")).code, 2);
}

TEST(Cli, EvalExternalCostsCsv) {
  ASSERT_EQ(run("generate --n 6 --count 3 --seed 2 --out " + w("ext.jsonl")).code, 0);
  auto insts = r2e::read_dataset(w("ext.jsonl"));
  {
    std::ofstream out(w("ext.csv"));
    out << "seed,cost\n";
    for (const auto& i : insts) out << i.seed << ",1.0\n";
  }
  auto r = run("eval --untrained --preset tiny --dataset " + w("ext.jsonl") + " --ref-costs " + w("ext.csv") +
               " --out " + w("e4.csv"));
  ASSERT_EQ(r.code, 0) << r.out;
}

TEST(Cli, SolveSquareGivesRoundedPerimeter) {
  std::ofstream(w("square.tsp")) << "NAME : square\nTYPE : TSP\nDIMENSION : 4\nEDGE_WEIGHT_TYPE : EUC_2D\n"
                                    "NODE_COORD_SECTION\n1 0 0\n2 0 10\n3 10 10\n4 10 0\nEOF\n";
  auto r = run("solve --untrained --preset tiny --lib " + w("square.tsp") + " --best-known 40 --out " + w("sq.json"));
  ASSERT_EQ(r.code, 0) << r.out;
  auto j = nlohmann::json::parse(split(slurp(w("sq.json")), '\n')[0]);
  EXPECT_EQ(j["cost"].get<long long>(), 40);
  EXPECT_EQ(j["gap"].get<double>(), 0.0);
  EXPECT_EQ(j["tour"].size(), 4u);
}

TEST(Cli, SolveGeoIsUnsupported) {
  std::ofstream(w("geo.tsp")) << "NAME : g\nTYPE : TSP\nDIMENSION : 3\nEDGE_WEIGHT_TYPE : GEO\n"
                                 "NODE_COORD_SECTION\n1 0 0\n2 1 1\n3 2 0\nEOF\n";
  auto r = run("solve --untrained --preset tiny --lib " + w("geo.tsp"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("GEO"), std::string::npos) << r.out;
}

TEST(Cli, AnalyzeIsReproducible) {
  ASSERT_EQ(run("generate --family uniform --n 8 --count 5 --seed 1 --out " + w("an_u.jsonl")).code, 0);
  ASSERT_EQ(run("generate --family cluster --n 8 --count 5 --seed 2 --out " + w("an_c.jsonl")).code, 0);
  const std::string args = "analyze --untrained --preset tiny --dataset " + w("an_u.jsonl") + " --dataset " +
                           w("an_c.jsonl") + " --out-dir ";
  ASSERT_EQ(run(args + w("an1")).code, 0);
  ASSERT_EQ(run(args + w("an2")).code, 0);
  EXPECT_EQ(slurp(w("an1/expert_usage.csv")), slurp(w("an2/expert_usage.csv")));
  EXPECT_EQ(slurp(w("an1/embeddings.csv")), slurp(w("an2/embeddings.csv")));
  EXPECT_EQ(line_count(w("an1/expert_usage.csv")), 1u + 2 * 3);
  EXPECT_EQ(line_count(w("an1/embeddings.csv")), 11u);
  auto header = split(split(slurp(w("an1/embeddings.csv")), '\n')[0], ',');
  EXPECT_EQ(header.size(), 2u + 8);
}

TEST(Cli, GradCheckPassesAndNegativeControlFails) {
  auto ok = run("grad-check");
  EXPECT_EQ(ok.code, 0) << ok.out;
  EXPECT_NE(ok.out.find("PASS"), std::string::npos);
  auto bad = run("grad-check --break backward");
  EXPECT_NE(bad.code, 0);
  EXPECT_NE(bad.out.find("FAIL"), std::string::npos);
}
