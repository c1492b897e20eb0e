// Dataset ingestion (graphmft-v1), the synthetic generator's statistical
// contracts (checked by an independent nearest-prototype oracle), and
// conversation-level splitting.

#include <cmath>
#include <map>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "graphmft/data.hpp"

using namespace graphmft;

namespace {

const char* kTinyFile =
    R"({"schema_tag":"graphmft-v1","v_dim":2,"a_dim":2,"t_dim":2,"num_classes":2,"num_speakers":2}
{"id":"c0","speakers":[1],"labels":[0],"v":[[0.5,-0.5]],"a":[[1.0,2.0]],"t":[[0.0,0.25]]}
)";

// Independent oracle: prototypes are the first num_classes basis vectors, so
// the nearest prototype is the argmax over the first num_classes coordinates.
std::size_t nearest_prototype(const std::vector<double>& x, std::size_t num_classes) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < num_classes; ++c)
    if (x[c] > x[best]) best = c;
  return best;
}

double modality_oracle_accuracy(const Dataset& d, Modality mod) {
  std::size_t correct = 0, total = 0;
  for (const auto& conv : d.conversations) {
    const auto& feats = conv.feats(mod);
    for (std::size_t i = 0; i < conv.length(); ++i) {
      correct += nearest_prototype(feats[i], d.header.num_classes) == conv.labels[i];
      ++total;
    }
  }
  return double(correct) / double(total);
}

SynthConfig small_cfg() {
  SynthConfig cfg;
  cfg.n_conv = 10;
  cfg.m_min = 3;
  cfg.m_max = 7;
  cfg.num_speakers = 3;
  cfg.num_classes = 3;
  cfg.v_dim = 5;
  cfg.a_dim = 6;
  cfg.t_dim = 7;
  cfg.seed = 99;
  return cfg;
}

}  // namespace

// ---------------------------------------------------------------------------
// load / save

TEST(LoadDataset, MinimalFileParses) {
  std::istringstream in(kTinyFile);
  Dataset d = load_dataset(in, "tiny");
  EXPECT_EQ(d.header.v_dim, 2u);
  EXPECT_EQ(d.header.num_classes, 2u);
  ASSERT_EQ(d.conversations.size(), 1u);
  EXPECT_EQ(d.conversations[0].id, "c0");
  EXPECT_EQ(d.conversations[0].length(), 1u);
  EXPECT_DOUBLE_EQ(d.conversations[0].v[0][1], -0.5);
}

TEST(LoadDataset, WrongFeatureLengthNamesLine) {
  std::string text =
      R"({"schema_tag":"graphmft-v1","v_dim":2,"a_dim":2,"t_dim":2,"num_classes":2,"num_speakers":2}
{"id":"c0","speakers":[0],"labels":[0],"v":[[0.5]],"a":[[1.0,2.0]],"t":[[0.0,0.25]]}
)";
  std::istringstream in(text);
  try {
    load_dataset(in, "bad");
    FAIL() << "expected a dim error";
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("bad:2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("'v'"), std::string::npos) << msg;
  }
}

TEST(LoadDataset, RejectsBadHeaderAndRanges) {
  {
    std::istringstream in(R"({"schema_tag":"graphmft-v2","v_dim":2,"a_dim":2,"t_dim":2,"num_classes":2,"num_speakers":2})");
    EXPECT_THROW(load_dataset(in, "x"), std::invalid_argument);
  }
  {
    std::istringstream in(R"({"schema_tag":"graphmft-v1","v_dim":2,"a_dim":2,"t_dim":2,"num_classes":2})");
    EXPECT_THROW(load_dataset(in, "x"), std::invalid_argument);  // missing num_speakers
  }
  {
    std::istringstream in("");
    EXPECT_THROW(load_dataset(in, "x"), std::invalid_argument);
  }
  {
    std::string text =
        R"({"schema_tag":"graphmft-v1","v_dim":1,"a_dim":1,"t_dim":1,"num_classes":2,"num_speakers":1}
{"id":"c0","speakers":[1],"labels":[0],"v":[[0]],"a":[[0]],"t":[[0]]}
)";
    std::istringstream in(text);
    EXPECT_THROW(load_dataset(in, "x"), std::invalid_argument);  // speaker out of range
  }
  {
    std::string text =
        R"({"schema_tag":"graphmft-v1","v_dim":1,"a_dim":1,"t_dim":1,"num_classes":2,"num_speakers":1}
{"id":"c0","speakers":[0],"labels":[2],"v":[[0]],"a":[[0]],"t":[[0]]}
)";
    std::istringstream in(text);
    EXPECT_THROW(load_dataset(in, "x"), std::invalid_argument);  // label out of range
  }
  EXPECT_THROW(load_dataset("/nonexistent/data.jsonl"), std::runtime_error);
}

TEST(SaveLoad, RoundTripOnGeneratedData) {
  Dataset d = gen_synthetic(small_cfg());
  const std::string path = ::testing::TempDir() + "roundtrip.jsonl";
  save_dataset(d, path);
  Dataset loaded = load_dataset(path);
  EXPECT_EQ(loaded, d);
}

// ---------------------------------------------------------------------------
// synthetic generator

TEST(GenSynthetic, DeterministicForFixedSeed) {
  Dataset a = gen_synthetic(small_cfg());
  Dataset b = gen_synthetic(small_cfg());
  EXPECT_EQ(dataset_to_string(a), dataset_to_string(b));
  SynthConfig other = small_cfg();
  other.seed += 1;
  EXPECT_NE(dataset_to_string(gen_synthetic(other)), dataset_to_string(a));
}

TEST(GenSynthetic, RespectsStructuralBounds) {
  SynthConfig cfg = small_cfg();
  Dataset d = gen_synthetic(cfg);
  validate_dataset(d);
  EXPECT_EQ(d.conversations.size(), cfg.n_conv);
  for (const auto& c : d.conversations) {
    EXPECT_GE(c.length(), cfg.m_min);
    EXPECT_LE(c.length(), cfg.m_max);
  }
}

TEST(GenSynthetic, NoiselessUnitSnrIsPerfectlySeparable) {
  SynthConfig cfg = small_cfg();
  cfg.noise_sigma = 0.0;
  cfg.snr_v = cfg.snr_a = cfg.snr_t = 1.0;
  Dataset d = gen_synthetic(cfg);
  for (Modality mod : {Modality::V, Modality::A, Modality::T}) {
    EXPECT_DOUBLE_EQ(modality_oracle_accuracy(d, mod), 1.0) << modality_char(mod);
  }
}

TEST(GenSynthetic, SnrOrderingInducesOracleAccuracyOrdering) {
  SynthConfig cfg = small_cfg();
  cfg.n_conv = 60;
  cfg.noise_sigma = 0.5;
  cfg.snr_v = 0.2;
  cfg.snr_a = 0.6;
  cfg.snr_t = 1.0;
  cfg.seed = 2024;
  Dataset d = gen_synthetic(cfg);
  const double acc_v = modality_oracle_accuracy(d, Modality::V);
  const double acc_a = modality_oracle_accuracy(d, Modality::A);
  const double acc_t = modality_oracle_accuracy(d, Modality::T);
  EXPECT_LT(acc_v, acc_a);
  EXPECT_LT(acc_a, acc_t);
}

TEST(GenSynthetic, UniformStickinessGivesUniformMarginals) {
  SynthConfig cfg = small_cfg();
  cfg.num_classes = 4;
  cfg.transition_stickiness = 0.25;  // = 1/num_classes -> i.i.d. uniform labels
  cfg.n_conv = 1500;
  cfg.m_min = 6;
  cfg.m_max = 10;
  cfg.seed = 5;
  Dataset d = gen_synthetic(cfg);
  std::map<std::size_t, std::size_t> counts;
  std::size_t total = 0;
  for (const auto& c : d.conversations)
    for (std::size_t y : c.labels) {
      ++counts[y];
      ++total;
    }
  ASSERT_GE(total, std::size_t(10000));
  const double p = 0.25;
  const double sigma = std::sqrt(double(total) * p * (1 - p));
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_NEAR(double(counts[c]), double(total) * p, 3.0 * sigma) << "class " << c;
  }
}

TEST(GenSynthetic, StickyChainsRepeatLabels) {
  SynthConfig cfg = small_cfg();
  cfg.transition_stickiness = 0.9;
  cfg.n_conv = 200;
  cfg.seed = 12;
  Dataset d = gen_synthetic(cfg);
  std::size_t same = 0, transitions = 0;
  for (const auto& c : d.conversations)
    for (std::size_t i = 1; i < c.length(); ++i) {
      same += c.labels[i] == c.labels[i - 1];
      ++transitions;
    }
  EXPECT_GT(double(same) / double(transitions), 0.8);
}

TEST(GenSynthetic, SpeakerOffsetsHaveRequestedNorm) {
  SynthConfig cfg = small_cfg();
  cfg.noise_sigma = 0.0;
  cfg.snr_v = 0.0;  // features collapse to the speaker offset alone
  Dataset d = gen_synthetic(cfg);
  for (const auto& c : d.conversations) {
    for (const auto& row : c.v) {
      double norm = 0;
      for (double x : row) norm += x * x;
      EXPECT_NEAR(std::sqrt(norm), cfg.speaker_offset_norm, 1e-9);
    }
  }
}

TEST(GenSynthetic, RejectsInvalidConfig) {
  auto expect_bad = [](auto mutate) {
    SynthConfig cfg = small_cfg();
    mutate(cfg);
    EXPECT_THROW(gen_synthetic(cfg), std::invalid_argument);
  };
  expect_bad([](SynthConfig& c) { c.num_classes = 1; });
  expect_bad([](SynthConfig& c) { c.v_dim = 2; });  // < num_classes
  expect_bad([](SynthConfig& c) { c.m_min = 5; c.m_max = 4; });
  expect_bad([](SynthConfig& c) { c.n_conv = 0; });
  expect_bad([](SynthConfig& c) { c.transition_stickiness = 1.5; });
  expect_bad([](SynthConfig& c) { c.noise_sigma = -1; });
  expect_bad([](SynthConfig& c) { c.speaker_align = 2.0; });
}

// ---------------------------------------------------------------------------
// splitting

TEST(SplitDataset, SizesAndPartition) {
  SynthConfig cfg = small_cfg();
  cfg.n_conv = 10;
  Dataset d = gen_synthetic(cfg);
  DatasetSplits s = split_dataset(d, {0.8, 0.1, 0.1}, 7);
  EXPECT_EQ(s.train.conversations.size(), 8u);
  EXPECT_EQ(s.valid.conversations.size(), 1u);
  EXPECT_EQ(s.test.conversations.size(), 1u);
  EXPECT_EQ(s.train.split, Split::Train);
  EXPECT_EQ(s.valid.split, Split::Valid);
  EXPECT_EQ(s.test.split, Split::Test);

  // Disjoint and exhaustive at conversation-id level.
  std::map<std::string, int> seen;
  for (const auto* part : {&s.train, &s.valid, &s.test})
    for (const auto& c : part->conversations) seen[c.id] += 1;
  EXPECT_EQ(seen.size(), d.conversations.size());
  for (const auto& [id, n] : seen) EXPECT_EQ(n, 1) << id;
}

TEST(SplitDataset, DeterministicAndSeedSensitive) {
  Dataset d = gen_synthetic(small_cfg());
  DatasetSplits a = split_dataset(d, {0.6, 0.2, 0.2}, 3);
  DatasetSplits b = split_dataset(d, {0.6, 0.2, 0.2}, 3);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.valid, b.valid);
  EXPECT_EQ(a.test, b.test);
}

TEST(SplitDataset, ErrorsOnDegenerateRatios) {
  Dataset d = gen_synthetic(small_cfg());
  EXPECT_THROW(split_dataset(d, {1.0, 0.0, 0.0}, 1), std::invalid_argument);
  EXPECT_THROW(split_dataset(d, {0.5, 0.3, 0.3}, 1), std::invalid_argument);  // sums to 1.1
  // Positive ratios that still round to an empty split on 10 conversations.
  EXPECT_THROW(split_dataset(d, {0.98, 0.01, 0.01}, 1), std::invalid_argument);
}
