// End-to-end tests of the command-line tool. Each test shells out to the
// real binary (path taken from GRAPHMFT_CLI, falling back to the graphmft
// binary beside this executable) and asserts on exit codes, printed output,
// and the files left behind.

#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include "graphmft/graphmft.hpp"

using namespace graphmft;

namespace {

namespace fs = std::filesystem;

const std::string& cli_path() {
  static const std::string path = [] {
    const char* env = std::getenv("GRAPHMFT_CLI");
    if (env != nullptr) return std::string(env);
    // Fall back to the CLI built next to this test executable.
    std::error_code ec;
    const fs::path exe = fs::read_symlink("/proc/self/exe", ec);
    if (!ec) return (exe.parent_path() / "graphmft").string();
    return std::string("./graphmft");
  }();
  return path;
}

// Fresh per-test scratch directory under the gtest temp root.
std::string fresh_dir(const std::string& name) {
  fs::path dir = fs::path(::testing::TempDir()) / "graphmft_cli" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir.string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  EXPECT_TRUE(in.good()) << "cannot open " << path;
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct CmdResult {
  int status = -1;
  std::string out;
  std::string err;
};

// Runs `<env_prefix> <cli> <args>` through the shell, capturing both streams.
CmdResult run_cli(const std::string& args, const std::string& scratch,
                  const std::string& env_prefix = "") {
  static int counter = 0;
  const std::string tag = std::to_string(counter++);
  const std::string out_file = scratch + "/cmd_out_" + tag + ".txt";
  const std::string err_file = scratch + "/cmd_err_" + tag + ".txt";
  const std::string cmd =
      env_prefix + cli_path() + " " + args + " >" + out_file + " 2>" + err_file;
  const int raw = std::system(cmd.c_str());
  CmdResult r;
  r.status = raw == -1 ? -1 : (WIFEXITED(raw) ? WEXITSTATUS(raw) : -2);
  r.out = slurp(out_file);
  r.err = slurp(err_file);
  return r;
}

// Small synthetic dataset: 12 conversations, 3 classes, dims 5/6/7.
std::string make_dataset(const std::string& scratch, const std::string& extra = "") {
  const std::string path = scratch + "/data.gm";
  CmdResult r = run_cli("gen-synth --out " + path +
                            " --n-conv 12 --m-min 4 --m-max 7 --num-classes 3"
                            " --v-dim 5 --a-dim 6 --t-dim 7 --seed 7" +
                            (extra.empty() ? "" : " " + extra),
                        scratch);
  EXPECT_EQ(r.status, 0) << r.err;
  return path;
}

// Nearly noiseless dataset a small model can drive to 100% accuracy.
std::string make_easy_dataset(const std::string& scratch) {
  const std::string path = scratch + "/easy.gm";
  CmdResult r = run_cli("gen-synth --out " + path +
                            " --n-conv 6 --m-min 4 --m-max 6 --num-classes 3"
                            " --v-dim 4 --a-dim 4 --t-dim 4 --noise-sigma 0.15 --seed 5",
                        scratch);
  EXPECT_EQ(r.status, 0) << r.err;
  return path;
}

constexpr const char* kTinyModelFlags =
    " --d 8 --heads 2 --layers 1 --rnn-hidden 4 --max-epochs 3 --batch-size 4"
    " --lr 1e-3 --seed 3";

// ---------------------------------------------------------------------------
// top-level interface

TEST(Cli, RequiresASubcommand) {
  const std::string scratch = fresh_dir("no_subcommand");
  CmdResult r = run_cli("", scratch);
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.err.find("subcommand"), std::string::npos) << r.err;
}

TEST(Cli, HelpListsAllSubcommands) {
  const std::string scratch = fresh_dir("help");
  CmdResult r = run_cli("--help", scratch);
  EXPECT_EQ(r.status, 0);
  for (const char* name : {"gen-synth", "graph-dump", "gradcheck", "train", "eval", "ablate"}) {
    EXPECT_NE(r.out.find(name), std::string::npos) << "missing " << name << " in:\n" << r.out;
  }
}

// ---------------------------------------------------------------------------
// gen-synth

TEST(GenSynth, IsDeterministicPerSeed) {
  const std::string scratch = fresh_dir("gen_synth_det");
  const std::string base =
      " --n-conv 8 --m-min 3 --m-max 6 --num-classes 4 --v-dim 4 --a-dim 4 --t-dim 4";
  CmdResult a = run_cli("gen-synth --out " + scratch + "/a.gm" + base + " --seed 11", scratch);
  CmdResult b = run_cli("gen-synth --out " + scratch + "/b.gm" + base + " --seed 11", scratch);
  CmdResult c = run_cli("gen-synth --out " + scratch + "/c.gm" + base + " --seed 12", scratch);
  ASSERT_EQ(a.status, 0) << a.err;
  ASSERT_EQ(b.status, 0) << b.err;
  ASSERT_EQ(c.status, 0) << c.err;
  EXPECT_EQ(slurp(scratch + "/a.gm"), slurp(scratch + "/b.gm"));
  EXPECT_NE(slurp(scratch + "/a.gm"), slurp(scratch + "/c.gm"));
}

TEST(GenSynth, PrintsHeaderAndCountsAndWritesLoadableFile) {
  const std::string scratch = fresh_dir("gen_synth_report");
  const std::string path = scratch + "/data.gm";
  CmdResult r = run_cli("gen-synth --out " + path +
                            " --n-conv 12 --m-min 4 --m-max 7 --num-classes 3"
                            " --v-dim 5 --a-dim 6 --t-dim 7 --seed 7",
                        scratch);
  ASSERT_EQ(r.status, 0) << r.err;

  std::istringstream lines(r.out);
  std::string header_line;
  ASSERT_TRUE(std::getline(lines, header_line));
  const auto header = nlohmann::json::parse(header_line);
  EXPECT_EQ(header.at("schema_tag"), "graphmft-v1");
  EXPECT_EQ(header.at("v_dim"), 5);
  EXPECT_EQ(header.at("a_dim"), 6);
  EXPECT_EQ(header.at("t_dim"), 7);
  EXPECT_EQ(header.at("num_classes"), 3);
  EXPECT_NE(r.out.find("wrote 12 conversations"), std::string::npos) << r.out;

  Dataset d = load_dataset(path);
  EXPECT_EQ(d.conversations.size(), 12u);
  for (const auto& conv : d.conversations) {
    EXPECT_GE(conv.length(), 4u);
    EXPECT_LE(conv.length(), 7u);
  }
}

TEST(GenSynth, RejectsDegenerateClassCount) {
  const std::string scratch = fresh_dir("gen_synth_bad");
  CmdResult r = run_cli("gen-synth --out " + scratch + "/x.gm --num-classes 1", scratch);
  EXPECT_EQ(r.status, 1);
  EXPECT_NE(r.err.find("num_classes must be >= 2"), std::string::npos) << r.err;
}

// ---------------------------------------------------------------------------
// graph-dump

TEST(GraphDump, WindowedPairGraphEdgeList) {
  const std::string scratch = fresh_dir("graph_dump_m3");
  CmdResult r = run_cli("graph-dump --m 3 --pair va --p 1 --f 1", scratch);
  ASSERT_EQ(r.status, 0) << r.err;
  const char* expected =
      "v 0 v 0 self\n"
      "v 0 v 1 intra\n"
      "v 0 a 0 inter\n"
      "v 1 v 0 intra\n"
      "v 1 v 1 self\n"
      "v 1 v 2 intra\n"
      "v 1 a 1 inter\n"
      "v 2 v 1 intra\n"
      "v 2 v 2 self\n"
      "v 2 a 2 inter\n"
      "a 0 v 0 inter\n"
      "a 0 a 0 self\n"
      "a 0 a 1 intra\n"
      "a 1 v 1 inter\n"
      "a 1 a 0 intra\n"
      "a 1 a 1 self\n"
      "a 1 a 2 intra\n"
      "a 2 v 2 inter\n"
      "a 2 a 1 intra\n"
      "a 2 a 2 self\n";
  EXPECT_EQ(r.out, expected);
}

TEST(GraphDump, SingleUtteranceWithoutSelfLoopsKeepsOnlyInterEdges) {
  const std::string scratch = fresh_dir("graph_dump_m1");
  CmdResult r = run_cli("graph-dump --m 1 --pair va --p 0 --f 0 --no-self-loops", scratch);
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_EQ(r.out, "v 0 a 0 inter\na 0 v 0 inter\n");
}

TEST(GraphDump, FileOutputMatchesStdout) {
  const std::string scratch = fresh_dir("graph_dump_file");
  CmdResult to_stdout = run_cli("graph-dump --m 4 --pair at --p 2 --f 1", scratch);
  CmdResult to_file = run_cli(
      "graph-dump --m 4 --pair at --p 2 --f 1 --out " + scratch + "/edges.txt", scratch);
  ASSERT_EQ(to_stdout.status, 0) << to_stdout.err;
  ASSERT_EQ(to_file.status, 0) << to_file.err;
  EXPECT_EQ(slurp(scratch + "/edges.txt"), to_stdout.out);
}

TEST(GraphDump, RejectsUnknownPair) {
  const std::string scratch = fresh_dir("graph_dump_bad_pair");
  CmdResult r = run_cli("graph-dump --m 3 --pair xy", scratch);
  EXPECT_EQ(r.status, 1);
  EXPECT_NE(r.err.find("expected va, vt, or at"), std::string::npos) << r.err;
}

// ---------------------------------------------------------------------------
// gradcheck

TEST(GradCheck, ModelScopePassesBothPrecisions) {
  const std::string scratch = fresh_dir("gradcheck_model");
  CmdResult r = run_cli("gradcheck --scope model --seed 1", scratch);
  EXPECT_EQ(r.status, 0) << r.out << r.err;
  EXPECT_NE(r.out.find("float32"), std::string::npos);
  EXPECT_NE(r.out.find("float64"), std::string::npos);
  EXPECT_NE(r.out.find("PASS"), std::string::npos) << r.out;
}

TEST(GradCheck, LayersScopePasses) {
  const std::string scratch = fresh_dir("gradcheck_layers");
  CmdResult r = run_cli("gradcheck --scope layers --seed 2", scratch);
  EXPECT_EQ(r.status, 0) << r.out << r.err;
  EXPECT_NE(r.out.find("PASS"), std::string::npos) << r.out;
}

TEST(GradCheck, ReportIsDeterministicForAFixedSeed) {
  const std::string scratch = fresh_dir("gradcheck_det");
  CmdResult a = run_cli("gradcheck --scope model --seed 4", scratch);
  CmdResult b = run_cli("gradcheck --scope model --seed 4", scratch);
  ASSERT_EQ(a.status, 0) << a.out;
  EXPECT_EQ(a.out, b.out);
}

TEST(GradCheck, TolOverrideCanForceFailure) {
  const std::string scratch = fresh_dir("gradcheck_tol");
  CmdResult r = run_cli("gradcheck --scope model --seed 1 --tol 1e-12", scratch);
  EXPECT_EQ(r.status, 1);
  EXPECT_NE(r.out.find("FAIL"), std::string::npos) << r.out;
}

TEST(GradCheck, RejectsUnknownScope) {
  const std::string scratch = fresh_dir("gradcheck_scope");
  CmdResult r = run_cli("gradcheck --scope bogus", scratch);
  EXPECT_EQ(r.status, 1);
  EXPECT_NE(r.err.find("expected layers or model"), std::string::npos) << r.err;
}

// ---------------------------------------------------------------------------
// train

TEST(Train, WritesCheckpointHistoryAndMetrics) {
  const std::string scratch = fresh_dir("train_smoke");
  const std::string data = make_dataset(scratch);
  CmdResult r = run_cli("train --data " + data + kTinyModelFlags + " --out-dir " + scratch + "/run",
                        scratch);
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_NE(r.out.find("trained 3 epochs"), std::string::npos) << r.out;

  EXPECT_TRUE(fs::exists(scratch + "/run/model.ckpt"));
  const std::string history = slurp(scratch + "/run/history.csv");
  EXPECT_EQ(history.rfind("epoch,loss,acc,wf1\n", 0), 0u) << history;
  EXPECT_EQ(std::count(history.begin(), history.end(), '\n'), 1 + 3);

  const auto metrics = nlohmann::json::parse(slurp(scratch + "/run/metrics.json"));
  for (const char* key : {"accuracy", "weighted_f1", "per_class_f1", "confusion"}) {
    EXPECT_TRUE(metrics.contains(key)) << key;
  }

  Checkpoint ck = load_checkpoint(scratch + "/run/model.ckpt");
  EXPECT_EQ(ck.cfg.d, 8u);
  EXPECT_EQ(ck.cfg.v_dim, 5u);  // adopted from the dataset header
}

TEST(Train, RerunWithSameSeedIsByteIdentical) {
  const std::string scratch = fresh_dir("train_rerun");
  const std::string data = make_dataset(scratch);
  const std::string flags = "train --data " + data + kTinyModelFlags;
  CmdResult a = run_cli(flags + " --out-dir " + scratch + "/a", scratch);
  CmdResult b = run_cli(flags + " --out-dir " + scratch + "/b", scratch);
  ASSERT_EQ(a.status, 0) << a.err;
  ASSERT_EQ(b.status, 0) << b.err;
  EXPECT_EQ(slurp(scratch + "/a/metrics.json"), slurp(scratch + "/b/metrics.json"));
  EXPECT_EQ(slurp(scratch + "/a/history.csv"), slurp(scratch + "/b/history.csv"));
  EXPECT_EQ(slurp(scratch + "/a/model.ckpt"), slurp(scratch + "/b/model.ckpt"));
}

TEST(Train, ModalitySubsetIsRecordedInTheCheckpoint) {
  const std::string scratch = fresh_dir("train_subset");
  const std::string data = make_dataset(scratch);
  CmdResult r = run_cli("train --data " + data + kTinyModelFlags + " --modalities at --out-dir " +
                            scratch + "/run",
                        scratch);
  ASSERT_EQ(r.status, 0) << r.err;
  Checkpoint ck = load_checkpoint(scratch + "/run/model.ckpt");
  EXPECT_EQ(ck.cfg.modalities.str(), "at");
}

// Precedence: defaults, then --config, then GRAPHMFT_SEED, then flags. The
// trace of each run (per-epoch losses) identifies which seed actually won.
TEST(Train, ConfigEnvAndFlagPrecedence) {
  const std::string scratch = fresh_dir("train_precedence");
  const std::string data = make_easy_dataset(scratch);
  const std::string common = "train --train " + data + " --valid " + data +
                             " --d 8 --heads 2 --layers 1 --rnn-hidden 4 --max-epochs 2"
                             " --batch-size 2 --lr 1e-3";

  CmdResult seed22 = run_cli(common + " --seed 22 --out-dir " + scratch + "/seed22", scratch);
  CmdResult seed33 = run_cli(common + " --seed 33 --out-dir " + scratch + "/seed33", scratch);
  ASSERT_EQ(seed22.status, 0) << seed22.err;
  ASSERT_EQ(seed33.status, 0) << seed33.err;
  const std::string trace22 = slurp(scratch + "/seed22/history.csv");
  const std::string trace33 = slurp(scratch + "/seed33/history.csv");
  ASSERT_NE(trace22, trace33);  // otherwise the comparisons below prove nothing

  std::ofstream(scratch + "/cfg.json") << R"({"seed": 11})" << "\n";
  CmdResult env_wins = run_cli(common + " --config " + scratch + "/cfg.json --out-dir " + scratch +
                                   "/env_wins",
                               scratch, "GRAPHMFT_SEED=22 ");
  ASSERT_EQ(env_wins.status, 0) << env_wins.err;
  EXPECT_EQ(slurp(scratch + "/env_wins/history.csv"), trace22);

  CmdResult flag_wins = run_cli(common + " --seed 33 --out-dir " + scratch + "/flag_wins", scratch,
                                "GRAPHMFT_SEED=22 ");
  ASSERT_EQ(flag_wins.status, 0) << flag_wins.err;
  EXPECT_EQ(slurp(scratch + "/flag_wins/history.csv"), trace33);
}

TEST(Train, ConfigFileValuesApply) {
  const std::string scratch = fresh_dir("train_config");
  const std::string data = make_easy_dataset(scratch);
  std::ofstream(scratch + "/cfg.json")
      << R"({"d": 8, "heads": 2, "layers": 1, "rnn_hidden": 4, "max_epochs": 4,)"
      << R"( "batch_size": 2, "lr": 0.001, "seed": 9})" << "\n";
  CmdResult r = run_cli("train --train " + data + " --valid " + data + " --config " + scratch +
                            "/cfg.json --out-dir " + scratch + "/run",
                        scratch);
  ASSERT_EQ(r.status, 0) << r.err;
  const std::string history = slurp(scratch + "/run/history.csv");
  EXPECT_EQ(std::count(history.begin(), history.end(), '\n'), 1 + 4) << history;
  Checkpoint ck = load_checkpoint(scratch + "/run/model.ckpt");
  EXPECT_EQ(ck.cfg.d, 8u);
}

TEST(Train, RejectsUnknownConfigKey) {
  const std::string scratch = fresh_dir("train_bad_config");
  const std::string data = make_easy_dataset(scratch);
  std::ofstream(scratch + "/cfg.json") << R"({"d": 8, "nonsense_key": 1})" << "\n";
  CmdResult r = run_cli("train --data " + data + " --config " + scratch + "/cfg.json", scratch);
  EXPECT_EQ(r.status, 1);
  EXPECT_NE(r.err.find("unknown key 'nonsense_key'"), std::string::npos) << r.err;
}

TEST(Train, RejectsMalformedEnvSeed) {
  const std::string scratch = fresh_dir("train_bad_env");
  const std::string data = make_easy_dataset(scratch);
  CmdResult r = run_cli("train --data " + data, scratch, "GRAPHMFT_SEED=abc ");
  EXPECT_EQ(r.status, 1);
  EXPECT_NE(r.err.find("GRAPHMFT_SEED"), std::string::npos) << r.err;
}

TEST(Train, RejectsMixingDataAndExplicitSplits) {
  const std::string scratch = fresh_dir("train_mixed_splits");
  const std::string data = make_easy_dataset(scratch);
  CmdResult r = run_cli("train --data " + data + " --train " + data, scratch);
  EXPECT_EQ(r.status, 1);
  EXPECT_NE(r.err.find("not both"), std::string::npos) << r.err;
}

// ---------------------------------------------------------------------------
// eval

TEST(Eval, ReproducesTrainingAccuracyFromTheCheckpoint) {
  const std::string scratch = fresh_dir("eval_roundtrip");
  const std::string data = make_easy_dataset(scratch);
  CmdResult train = run_cli("train --train " + data + " --valid " + data +
                                " --d 16 --heads 2 --layers 1 --rnn-hidden 8 --max-epochs 60"
                                " --batch-size 2 --lr 5e-3 --seed 1 --patience 0 --out-dir " +
                                scratch + "/run",
                            scratch);
  ASSERT_EQ(train.status, 0) << train.err;

  CmdResult eval = run_cli("eval --ckpt " + scratch + "/run/model.ckpt --data " + data +
                               " --out-dir " + scratch + "/eval",
                           scratch);
  ASSERT_EQ(eval.status, 0) << eval.err;
  const auto metrics = nlohmann::json::parse(slurp(scratch + "/eval/metrics.json"));
  EXPECT_GE(metrics.at("accuracy").get<double>(), 0.99);

  // Confusion rows are indexed by true label, so row sums equal class support.
  std::vector<std::size_t> support(3, 0);
  for (const auto& conv : load_dataset(data).conversations) {
    for (std::size_t label : conv.labels) ++support[label];
  }
  const auto& confusion = metrics.at("confusion");
  ASSERT_EQ(confusion.size(), 3u);
  for (std::size_t c = 0; c < 3; ++c) {
    std::size_t row_sum = 0;
    for (const auto& cell : confusion[c]) row_sum += cell.get<std::size_t>();
    EXPECT_EQ(row_sum, support[c]) << "class " << c;
  }
  EXPECT_TRUE(fs::exists(scratch + "/eval/confusion.csv"));
}

TEST(Eval, RejectsDatasetWithMismatchedDims) {
  const std::string scratch = fresh_dir("eval_mismatch");
  const std::string data = make_easy_dataset(scratch);
  CmdResult train = run_cli("train --train " + data + " --valid " + data + kTinyModelFlags +
                                " --out-dir " + scratch + "/run",
                            scratch);
  ASSERT_EQ(train.status, 0) << train.err;

  CmdResult gen = run_cli("gen-synth --out " + scratch +
                              "/other.gm --n-conv 4 --num-classes 3"
                              " --v-dim 4 --a-dim 4 --t-dim 9 --seed 5",
                          scratch);
  ASSERT_EQ(gen.status, 0) << gen.err;
  CmdResult r = run_cli(
      "eval --ckpt " + scratch + "/run/model.ckpt --data " + scratch + "/other.gm", scratch);
  EXPECT_EQ(r.status, 1);
  EXPECT_NE(r.err.find("checkpoint expects"), std::string::npos) << r.err;
}

// ---------------------------------------------------------------------------
// ablate

TEST(Ablate, DepthSuiteWritesAggregateAndPerRunTables) {
  const std::string scratch = fresh_dir("ablate_depth");
  const std::string data = make_dataset(scratch);
  CmdResult r = run_cli("ablate --data " + data +
                            " --suite depth --grid 1,2 --seeds 2 --d 8 --heads 2 --rnn-hidden 4"
                            " --max-epochs 2 --batch-size 4 --out-dir " +
                            scratch + "/abl",
                        scratch);
  ASSERT_EQ(r.status, 0) << r.err;

  std::istringstream agg(slurp(scratch + "/abl/ablation.csv"));
  std::string line;
  ASSERT_TRUE(std::getline(agg, line));
  EXPECT_EQ(line, "config,seeds,acc_mean,acc_stdev,wf1_mean,wf1_stdev");
  std::vector<std::string> configs;
  while (std::getline(agg, line)) configs.push_back(line.substr(0, line.find(',')));
  EXPECT_EQ(configs, (std::vector<std::string>{"improved-d1", "vanilla-d1", "improved-d2",
                                               "vanilla-d2"}));

  const std::string runs = slurp(scratch + "/abl/ablation_runs.csv");
  EXPECT_EQ(runs.rfind("config,seed,acc,wf1\n", 0), 0u) << runs;
  EXPECT_EQ(std::count(runs.begin(), runs.end(), '\n'), 1 + 4 * 2);
  EXPECT_EQ(runs.find("error"), std::string::npos) << runs;
}

TEST(Ablate, RejectsUnknownSuite) {
  const std::string scratch = fresh_dir("ablate_bad_suite");
  const std::string data = make_dataset(scratch);
  CmdResult r = run_cli("ablate --data " + data + " --suite bogus --grid 1,2", scratch);
  EXPECT_EQ(r.status, 1);
  EXPECT_NE(r.err.find("unknown ablation suite"), std::string::npos) << r.err;
}

}  // namespace
