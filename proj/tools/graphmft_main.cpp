// graphmft command-line tool: synthetic data generation, graph inspection,
// gradient checking, training, evaluation, and ablation sweeps.
//
// Settings for train/ablate merge in fixed precedence: built-in defaults,
// then the --config JSON file, then the GRAPHMFT_SEED environment variable,
// then explicit command-line flags. Every run parameter has exactly one
// config key (the flag name with '-' replaced by '_').

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "graphmft/graphmft.hpp"

namespace {

using namespace graphmft;

std::string fmt3e(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

// ---------------------------------------------------------------------------
// shared run settings (train / ablate)

struct RunSettings {
  ModelConfig model;
  TrainConfig train;
  std::string modalities = "vat";
  std::string gat_variant = "improved";
  std::string data;
  std::string train_path;
  std::string valid_path;
  std::string test_path;
  std::string split = "0.8,0.1,0.1";
  std::string out_dir = ".";
};

SplitRatios parse_split_ratios(const std::string& s) {
  std::vector<double> parts;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      parts.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw std::invalid_argument("split: '" + item + "' is not a number in '" + s + "'");
    }
  }
  if (parts.size() != 3) {
    throw std::invalid_argument("split: expected three comma-separated ratios, got '" + s + "'");
  }
  SplitRatios r{parts[0], parts[1], parts[2]};
  r.validate();
  return r;
}

std::vector<std::string> parse_grid(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) throw std::invalid_argument("grid: empty entry in '" + s + "'");
    out.push_back(item);
  }
  if (out.empty()) throw std::invalid_argument("grid: no entries in '" + s + "'");
  return out;
}

// Applies a flat JSON config file onto the settings; unknown keys are errors.
void apply_config_file(RunSettings& rs, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("config '" + path + "': " + e.what());
  }
  if (!j.is_object()) throw std::invalid_argument("config '" + path + "': expected a JSON object");

  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "d") rs.model.d = value.get<std::size_t>();
      else if (key == "heads") rs.model.heads = value.get<std::size_t>();
      else if (key == "layers") rs.model.layers = value.get<std::size_t>();
      else if (key == "rnn_hidden") rs.model.rnn_hidden = value.get<std::size_t>();
      else if (key == "window_p") rs.model.window_p = value.get<std::size_t>();
      else if (key == "window_f") rs.model.window_f = value.get<std::size_t>();
      else if (key == "self_loops") rs.model.self_loops = value.get<bool>();
      else if (key == "dropout") rs.model.dropout = value.get<double>();
      else if (key == "use_speaker") rs.model.use_speaker = value.get<bool>();
      else if (key == "modalities") rs.modalities = value.get<std::string>();
      else if (key == "gat_variant") rs.gat_variant = value.get<std::string>();
      else if (key == "lr") rs.train.lr = value.get<double>();
      else if (key == "batch_size") rs.train.batch_size = value.get<std::size_t>();
      else if (key == "max_epochs") rs.train.max_epochs = value.get<std::size_t>();
      else if (key == "l2_lambda") rs.train.l2_lambda = value.get<double>();
      else if (key == "seed") rs.train.seed = value.get<std::uint64_t>();
      else if (key == "patience") rs.train.patience = value.get<std::size_t>();
      else if (key == "grad_clip") rs.train.grad_clip = value.get<double>();
      else if (key == "data") rs.data = value.get<std::string>();
      else if (key == "train") rs.train_path = value.get<std::string>();
      else if (key == "valid") rs.valid_path = value.get<std::string>();
      else if (key == "test") rs.test_path = value.get<std::string>();
      else if (key == "split") rs.split = value.get<std::string>();
      else if (key == "out_dir") rs.out_dir = value.get<std::string>();
      else throw std::invalid_argument("config '" + path + "': unknown key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument("config '" + path + "': key '" + key + "': " + e.what());
    }
  }
}

// Registers the shared train/ablate flags. After parsing, merge() applies
// config file, environment, and explicitly passed flags in that order.
struct SharedOpts {
  RunSettings flags;  // bound flag targets
  std::string config_path;
  std::vector<std::pair<CLI::Option*, std::function<void(RunSettings&)>>> appliers;

  void add_to(CLI::App* cmd, bool with_data_flags) {
    cmd->add_option("--config", config_path, "flat JSON config file; flags override its values");

    auto opt = [&](CLI::Option* o, std::function<void(RunSettings&)> apply) {
      appliers.emplace_back(o, std::move(apply));
    };
    auto& f = flags;
    opt(cmd->add_option("--d", f.model.d, "hidden width d")->capture_default_str(),
        [this](RunSettings& rs) { rs.model.d = flags.model.d; });
    opt(cmd->add_option("--heads", f.model.heads, "attention heads K")->capture_default_str(),
        [this](RunSettings& rs) { rs.model.heads = flags.model.heads; });
    opt(cmd->add_option("--layers", f.model.layers, "graph attention depth L")->capture_default_str(),
        [this](RunSettings& rs) { rs.model.layers = flags.model.layers; });
    opt(cmd->add_option("--rnn-hidden", f.model.rnn_hidden, "recurrent encoder hidden size")
            ->capture_default_str(),
        [this](RunSettings& rs) { rs.model.rnn_hidden = flags.model.rnn_hidden; });
    opt(cmd->add_option("--window-p", f.model.window_p, "past context window P")->capture_default_str(),
        [this](RunSettings& rs) { rs.model.window_p = flags.model.window_p; });
    opt(cmd->add_option("--window-f", f.model.window_f, "future context window F")->capture_default_str(),
        [this](RunSettings& rs) { rs.model.window_f = flags.model.window_f; });
    opt(cmd->add_flag("--self-loops,!--no-self-loops", f.model.self_loops,
                      "add self edges to pair graphs (default: true)"),
        [this](RunSettings& rs) { rs.model.self_loops = flags.model.self_loops; });
    opt(cmd->add_option("--dropout", f.model.dropout, "dropout rate")->capture_default_str(),
        [this](RunSettings& rs) { rs.model.dropout = flags.model.dropout; });
    opt(cmd->add_flag("--use-speaker,!--no-use-speaker", f.model.use_speaker,
                      "add shared speaker embeddings (default: true)"),
        [this](RunSettings& rs) { rs.model.use_speaker = flags.model.use_speaker; });
    opt(cmd->add_option("--modalities", f.modalities, "enabled modalities, subset of vat")
            ->capture_default_str(),
        [this](RunSettings& rs) { rs.modalities = flags.modalities; });
    opt(cmd->add_option("--gat-variant", f.gat_variant, "improved or vanilla")->capture_default_str(),
        [this](RunSettings& rs) { rs.gat_variant = flags.gat_variant; });
    opt(cmd->add_option("--lr", f.train.lr, "learning rate")->capture_default_str(),
        [this](RunSettings& rs) { rs.train.lr = flags.train.lr; });
    opt(cmd->add_option("--batch-size", f.train.batch_size, "conversations per batch")
            ->capture_default_str(),
        [this](RunSettings& rs) { rs.train.batch_size = flags.train.batch_size; });
    opt(cmd->add_option("--max-epochs", f.train.max_epochs, "epoch budget")->capture_default_str(),
        [this](RunSettings& rs) { rs.train.max_epochs = flags.train.max_epochs; });
    opt(cmd->add_option("--l2-lambda", f.train.l2_lambda, "decoupled weight decay lambda")
            ->capture_default_str(),
        [this](RunSettings& rs) { rs.train.l2_lambda = flags.train.l2_lambda; });
    opt(cmd->add_option("--seed", f.train.seed, "master seed")->capture_default_str(),
        [this](RunSettings& rs) { rs.train.seed = flags.train.seed; });
    opt(cmd->add_option("--patience", f.train.patience,
                        "early-stop patience in epochs (0 = run all)")
            ->capture_default_str(),
        [this](RunSettings& rs) { rs.train.patience = flags.train.patience; });
    opt(cmd->add_option("--grad-clip", f.train.grad_clip,
                        "max global gradient norm (0 = off)")
            ->capture_default_str(),
        [this](RunSettings& rs) { rs.train.grad_clip = flags.train.grad_clip; });
    if (with_data_flags) {
      opt(cmd->add_option("--data", f.data, "dataset to split internally via --split"),
          [this](RunSettings& rs) { rs.data = flags.data; });
      opt(cmd->add_option("--train", f.train_path, "explicit train split file"),
          [this](RunSettings& rs) { rs.train_path = flags.train_path; });
      opt(cmd->add_option("--valid", f.valid_path, "explicit valid split file"),
          [this](RunSettings& rs) { rs.valid_path = flags.valid_path; });
      opt(cmd->add_option("--test", f.test_path, "explicit test split file"),
          [this](RunSettings& rs) { rs.test_path = flags.test_path; });
      opt(cmd->add_option("--split", f.split, "train,valid,test ratios for --data")
              ->capture_default_str(),
          [this](RunSettings& rs) { rs.split = flags.split; });
    }
    opt(cmd->add_option("--out-dir", f.out_dir, "output directory")->capture_default_str(),
        [this](RunSettings& rs) { rs.out_dir = flags.out_dir; });
  }

  RunSettings merge() const {
    RunSettings rs;
    if (!config_path.empty()) apply_config_file(rs, config_path);
    if (const char* env = std::getenv("GRAPHMFT_SEED")) {
      try {
        std::size_t used = 0;
        rs.train.seed = std::stoull(env, &used);
        if (used != std::string(env).size()) throw std::invalid_argument(env);
      } catch (const std::exception&) {
        throw std::invalid_argument("GRAPHMFT_SEED must be an unsigned integer, got '" +
                                    std::string(env) + "'");
      }
    }
    for (const auto& [option, apply] : appliers) {
      if (option->count() > 0) apply(rs);
    }
    return rs;
  }
};

struct LoadedSplits {
  Dataset train;
  Dataset valid;
  Dataset test;
  bool has_test = false;
};

LoadedSplits load_splits(const RunSettings& rs) {
  LoadedSplits out;
  if (!rs.data.empty()) {
    if (!rs.train_path.empty() || !rs.valid_path.empty() || !rs.test_path.empty()) {
      throw std::invalid_argument("pass either --data or explicit --train/--valid/--test, not both");
    }
    Dataset all = load_dataset(rs.data);
    DatasetSplits s = split_dataset(all, parse_split_ratios(rs.split), rs.train.seed);
    out.train = std::move(s.train);
    out.valid = std::move(s.valid);
    out.test = std::move(s.test);
    out.has_test = true;
    return out;
  }
  if (rs.train_path.empty() || rs.valid_path.empty()) {
    throw std::invalid_argument("need --data, or both --train and --valid");
  }
  out.train = load_dataset(rs.train_path);
  out.valid = load_dataset(rs.valid_path);
  if (out.valid.header != out.train.header) {
    throw std::invalid_argument("--valid header does not match --train header");
  }
  if (!rs.test_path.empty()) {
    out.test = load_dataset(rs.test_path);
    if (out.test.header != out.train.header) {
      throw std::invalid_argument("--test header does not match --train header");
    }
    out.has_test = true;
  }
  return out;
}

ModelConfig resolve_model(const RunSettings& rs, const DatasetHeader& header) {
  ModelConfig cfg = rs.model;
  cfg.modalities = ModalitySet::parse(rs.modalities);
  cfg.gat_variant = gat_variant_from_name(rs.gat_variant);
  cfg.adopt_header(header);
  cfg.validate();
  return cfg;
}

std::string path_join(const std::string& dir, const char* name) {
  if (dir.empty() || dir == ".") return name;
  return dir.back() == '/' ? dir + name : dir + "/" + name;
}

void ensure_out_dir(const std::string& dir) {
  if (!dir.empty() && dir != ".") std::filesystem::create_directories(dir);
}

// ---------------------------------------------------------------------------
// gradcheck fixtures
//
// Central differences measure the wrong slope when a perturbation crosses an
// activation kink (ReLU, LeakyReLU), so each fixture deterministically
// redraws its random inputs until every kink input clears a safety margin at
// the evaluation point. The margin search runs in double, so both precisions
// pick the same draw.

constexpr double kGradCheckEps32 = 3e-3;
constexpr double kGradCheckEps64 = 1e-5;

// Classifier pre-ReLU values sit on a direct path to the loss (slope change
// 1), so they must clear the float32 step with room to spare. Attention
// scores in the full model only need to clear the float64 step: a float32
// perturbation may cross their LeakyReLU kink (slope change 0.2), but the
// effect is attenuated through the softmax and the layers above it, well
// below the float32 tolerance. In the layers fixture the attention output
// feeds the loss directly, so there the scores need the generous margin too.
constexpr double kReluKinkMargin = 2 * kGradCheckEps32;
constexpr double kAttnKinkMargin = 10 * kGradCheckEps64;
constexpr double kLayersKinkMargin = 2 * kGradCheckEps32;
constexpr std::size_t kMaxFixtureDraws = 64;

ModelConfig gradcheck_model_config() {
  ModelConfig cfg;
  cfg.d = 8;
  cfg.heads = 2;
  cfg.layers = 2;
  cfg.rnn_hidden = 4;
  cfg.window_p = 1;
  cfg.window_f = 1;
  cfg.dropout = 0.0;
  cfg.num_classes = 3;
  cfg.num_speakers = 2;
  cfg.v_dim = 5;
  cfg.a_dim = 5;
  cfg.t_dim = 5;
  return cfg;
}

Conversation gradcheck_conversation(std::size_t m, const ModelConfig& cfg, std::uint64_t seed,
                                    std::size_t draw) {
  Rng rng(derive_seed(seed, "gradcheck/conv/" + std::to_string(draw)));
  Conversation conv;
  conv.id = "gradcheck";
  for (std::size_t i = 0; i < m; ++i) {
    conv.speakers.push_back(rng.uniform_int(0, cfg.num_speakers - 1));
    conv.labels.push_back(rng.uniform_int(0, cfg.num_classes - 1));
    auto row = [&](std::size_t dim) {
      std::vector<double> r(dim);
      for (auto& v : r) v = rng.normal(0.0, 0.5);
      return r;
    };
    conv.v.push_back(row(cfg.v_dim));
    conv.a.push_back(row(cfg.a_dim));
    conv.t.push_back(row(cfg.t_dim));
  }
  return conv;
}

double min_abs(const std::vector<double>& xs) {
  double m = std::numeric_limits<double>::infinity();
  for (double x : xs) m = std::min(m, std::abs(x));
  return m;
}

std::size_t pick_model_draw(std::uint64_t seed) {
  const ModelConfig cfg = gradcheck_model_config();
  auto params = make_params<double>(cfg, derive_seed(seed, "gradcheck/init"));
  for (std::size_t draw = 0; draw < kMaxFixtureDraws; ++draw) {
    Conversation conv = gradcheck_conversation(2, cfg, seed, draw);
    std::vector<double> attn_kinks, relu_kinks;
    ForwardOptions<double> opts;
    opts.attn_kink_probe = &attn_kinks;
    opts.relu_kink_probe = &relu_kinks;
    model_forward(cfg, params, conv, opts);
    if (min_abs(relu_kinks) >= kReluKinkMargin && min_abs(attn_kinks) >= kAttnKinkMargin) {
      return draw;
    }
  }
  return 0;
}

// The acceptance toy: m=2 conversation through a d=8, K=2, L=2 model.
template <typename Real>
GradCheckReport run_model_gradcheck(std::uint64_t seed, Real eps) {
  const ModelConfig cfg = gradcheck_model_config();
  auto params = make_params<Real>(cfg, derive_seed(seed, "gradcheck/init"));
  Conversation conv = gradcheck_conversation(2, cfg, seed, pick_model_draw(seed));
  auto named = named_params(params);
  auto loss = [&]() {
    Tensor<Real> logits = model_forward(cfg, params, conv);
    Tensor<Real> picked = pick_per_row(log_softmax(logits, 1), conv.labels);
    return scale(sum_all(picked), Real(-1) / Real(conv.length()));
  };
  return grad_check<Real>(loss, named, eps);
}

// Layer suite: one graph-attention layer, the bidirectional encoder, and a
// speaker-embedding gather, each normalized to O(1) and summed into a scalar.
template <typename Real>
struct LayersFixture {
  PairGraph graph;
  Tensor<Real> x;
  MultiHeadGraphAttentionLayer<Real> gat;
  BiRecurrentEncoder<Real> enc;
  Tensor<Real> seq;
  EmbeddingTable<Real> table;
  std::vector<std::size_t> speakers;
};

template <typename Real>
LayersFixture<Real> build_layers_fixture(std::uint64_t seed, std::size_t draw) {
  Rng rng(derive_seed(seed, "gradcheck/layers/" + std::to_string(draw)));
  auto rand_tensor = [&](Shape shape) {
    auto t = Tensor<Real>::zeros(std::move(shape), /*requires_grad=*/true);
    for (std::size_t i = 0; i < t.size(); ++i) t.at(i) = Real(rng.normal(0.0, 0.5));
    return t;
  };

  LayersFixture<Real> fx;
  fx.graph = build_pair_graph(2, Pair::VA, 1, 1, true);
  fx.x = rand_tensor({4, 4});
  fx.gat.heads.push_back({rand_tensor({2, 4}), rand_tensor({4})});
  fx.gat.heads.push_back({rand_tensor({2, 4}), rand_tensor({4})});
  auto direction = [&]() {
    return LstmDirection<Real>{rand_tensor({2, 3}), rand_tensor({2, 2}), rand_tensor({2}),
                               rand_tensor({2, 3}), rand_tensor({2, 2}), rand_tensor({2}),
                               rand_tensor({2, 3}), rand_tensor({2, 2}), rand_tensor({2}),
                               rand_tensor({2, 3}), rand_tensor({2, 2}), rand_tensor({2})};
  };
  fx.enc.fw = direction();
  fx.enc.bw = direction();
  fx.enc.proj = {rand_tensor({3, 4}), rand_tensor({3})};
  fx.seq = rand_tensor({3, 3});
  fx.table.E = rand_tensor({3, 4});
  fx.speakers = {2, 0, 2, 1};
  return fx;
}

std::size_t pick_layers_draw(std::uint64_t seed) {
  for (std::size_t draw = 0; draw < kMaxFixtureDraws; ++draw) {
    LayersFixture<double> fx = build_layers_fixture<double>(seed, draw);
    std::vector<double> kinks;
    GatForwardOptions<double> opts;
    opts.kink_probe = &kinks;
    gat_layer_forward(fx.gat, fx.x, fx.graph, opts);
    if (min_abs(kinks) >= kLayersKinkMargin) return draw;
  }
  return 0;
}

template <typename Real>
GradCheckReport run_layers_gradcheck(std::uint64_t seed, Real eps) {
  LayersFixture<Real> fx = build_layers_fixture<Real>(seed, pick_layers_draw(seed));

  std::vector<NamedParam<Real>> params{{"x", fx.x},
                                       {"seq", fx.seq},
                                       {"speaker.E", fx.table.E},
                                       {"proj.W", fx.enc.proj.W},
                                       {"proj.b", fx.enc.proj.b}};
  for (std::size_t k = 0; k < fx.gat.heads.size(); ++k) {
    params.push_back({"gat.h" + std::to_string(k) + ".W", fx.gat.heads[k].W});
    params.push_back({"gat.h" + std::to_string(k) + ".a", fx.gat.heads[k].a});
  }
  auto add_direction = [&](const char* tag, LstmDirection<Real>& d) {
    const char* names[] = {"wi", "ui", "bi", "wf", "uf", "bf", "wo", "uo", "bo", "wg", "ug", "bg"};
    Tensor<Real>* tensors[] = {&d.wi, &d.ui, &d.bi, &d.wf, &d.uf, &d.bf,
                               &d.wo, &d.uo, &d.bo, &d.wg, &d.ug, &d.bg};
    for (int i = 0; i < 12; ++i) params.push_back({std::string(tag) + names[i], *tensors[i]});
  };
  add_direction("fw.", fx.enc.fw);
  add_direction("bw.", fx.enc.bw);

  auto loss = [&]() {
    Tensor<Real> attn = gat_layer_forward(fx.gat, fx.x, fx.graph);
    Tensor<Real> attn_term = scale(sum_all(mul(add(attn, fx.x), attn)), Real(1) / Real(attn.size()));
    Tensor<Real> rec = birecurrent_forward(fx.enc, fx.seq);
    Tensor<Real> rec_term = scale(sum_all(mul(rec, rec)), Real(1) / Real(rec.size()));
    Tensor<Real> emb_term = scale(sum_all(speaker_embed(fx.table, fx.speakers)),
                                  Real(1) / Real(fx.table.E.cols() * fx.speakers.size()));
    return add(add(attn_term, rec_term), emb_term);
  };
  return grad_check<Real>(loss, params, eps);
}

// ---------------------------------------------------------------------------
// commands

int cmd_gen_synth(const SynthConfig& cfg, const std::string& out_path) {
  Dataset d = gen_synthetic(cfg);
  save_dataset(d, out_path);
  std::cout << dataset_header_to_json(d.header).dump() << "\n";
  std::cout << "wrote " << d.conversations.size() << " conversations (" << d.num_utterances()
            << " utterances) to " << out_path << "\n";
  return 0;
}

int cmd_graph_dump(std::size_t m, const std::string& pair, std::size_t p, std::size_t f,
                   bool self_loops, const std::string& out_path) {
  PairGraph g = build_pair_graph(m, pair_from_name(pair), p, f, self_loops);
  if (out_path.empty()) {
    std::cout << dump_graph_string(g);
  } else {
    dump_graph(g, out_path);
    std::cout << "wrote " << g.edges.size() << " edges to " << out_path << "\n";
  }
  return 0;
}

int cmd_gradcheck(const std::string& scope, std::uint64_t seed, double tol_override) {
  const double tol32 = tol_override > 0 ? tol_override : 1e-4;
  const double tol64 = tol_override > 0 ? tol_override : 1e-6;

  GradCheckReport r32, r64;
  if (scope == "model") {
    r32 = run_model_gradcheck<float>(seed, static_cast<float>(kGradCheckEps32));
    r64 = run_model_gradcheck<double>(seed, kGradCheckEps64);
  } else if (scope == "layers") {
    r32 = run_layers_gradcheck<float>(seed, static_cast<float>(kGradCheckEps32));
    r64 = run_layers_gradcheck<double>(seed, kGradCheckEps64);
  } else {
    throw std::invalid_argument("unknown gradcheck scope '" + scope +
                                "' (expected layers or model)");
  }

  std::cout << "gradcheck scope=" << scope << " seed=" << seed << "\n";
  auto report = [](const char* label, const GradCheckReport& r, double tol) {
    std::cout << label << " max_rel_err " << fmt3e(r.max_rel_err) << " over " << r.num_params
              << " entries (worst " << r.worst_param << "[" << r.worst_index << "], tol "
              << fmt3e(tol) << "): " << (r.pass(tol) ? "pass" : "FAIL") << "\n";
  };
  report("float32", r32, tol32);
  report("float64", r64, tol64);
  const bool ok = r32.pass(tol32) && r64.pass(tol64);
  std::cout << (ok ? "PASS" : "FAIL") << "\n";
  return ok ? 0 : 1;
}

int cmd_train(const SharedOpts& shared) {
  RunSettings rs = shared.merge();
  LoadedSplits splits = load_splits(rs);
  ModelConfig mcfg = resolve_model(rs, splits.train.header);
  rs.train.validate();

  TrainResult<float> result = train<float>(mcfg, rs.train, splits.train, splits.valid);
  const Dataset& report_set = splits.has_test ? splits.test : splits.valid;
  Metrics final = evaluate(mcfg, result.best_params, report_set);

  ensure_out_dir(rs.out_dir);
  const std::string ckpt_path = path_join(rs.out_dir, "model.ckpt");
  const std::string history_path = path_join(rs.out_dir, "history.csv");
  const std::string metrics_path = path_join(rs.out_dir, "metrics.json");
  save_checkpoint(mcfg, result.best_params, ckpt_path);
  atomic_write_file(history_path, history_to_csv(result.history));
  const std::string metrics_json = metrics_to_json(final).dump(2) + "\n";
  atomic_write_file(metrics_path, metrics_json);

  if (result.diverged) {
    std::cout << "warning: training diverged (non-finite loss); keeping best epoch so far\n";
  }
  std::cout << "trained " << result.history.size() << " epochs, best epoch " << result.best_epoch
            << " (valid wF1 " << detail::fmt_double(result.best_wf1) << ")\n";
  std::cout << (splits.has_test ? "test" : "valid") << " metrics:\n" << metrics_json;
  std::cout << "wrote " << ckpt_path << ", " << history_path << ", " << metrics_path << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_path,
             const std::string& out_dir) {
  Checkpoint ck = load_checkpoint(ckpt_path);
  Dataset data = load_dataset(data_path);
  const DatasetHeader& h = data.header;
  if (h.v_dim != ck.cfg.v_dim || h.a_dim != ck.cfg.a_dim || h.t_dim != ck.cfg.t_dim ||
      h.num_classes != ck.cfg.num_classes) {
    throw std::invalid_argument(
        "checkpoint expects v_dim=" + std::to_string(ck.cfg.v_dim) + " a_dim=" +
        std::to_string(ck.cfg.a_dim) + " t_dim=" + std::to_string(ck.cfg.t_dim) +
        " num_classes=" + std::to_string(ck.cfg.num_classes) + "; dataset has v_dim=" +
        std::to_string(h.v_dim) + " a_dim=" + std::to_string(h.a_dim) + " t_dim=" +
        std::to_string(h.t_dim) + " num_classes=" + std::to_string(h.num_classes));
  }
  if (h.num_speakers > ck.cfg.num_speakers) {
    throw std::invalid_argument("dataset has " + std::to_string(h.num_speakers) +
                                " speakers but checkpoint supports " +
                                std::to_string(ck.cfg.num_speakers));
  }

  Metrics m = evaluate(ck.cfg, ck.params, data);
  ensure_out_dir(out_dir);
  const std::string metrics_path = path_join(out_dir, "metrics.json");
  const std::string confusion_path = path_join(out_dir, "confusion.csv");
  const std::string metrics_json = metrics_to_json(m).dump(2) + "\n";
  atomic_write_file(metrics_path, metrics_json);
  atomic_write_file(confusion_path, confusion_to_csv(m));

  std::cout << metrics_json;
  std::cout << "wrote " << metrics_path << ", " << confusion_path << "\n";
  return 0;
}

int cmd_ablate(const SharedOpts& shared, const std::string& suite_name, const std::string& grid_csv,
               std::size_t num_seeds) {
  RunSettings rs = shared.merge();
  if (rs.data.empty()) throw std::invalid_argument("ablate: --data is required");
  AblationSuite suite = ablation_suite_from_name(suite_name);
  std::vector<std::string> grid = parse_grid(grid_csv);

  LoadedSplits splits = load_splits(rs);
  ModelConfig base = resolve_model(rs, splits.train.header);
  rs.train.validate();

  AblationResult result = run_ablation<float>(suite, base, rs.train, grid, num_seeds, splits.train,
                                              splits.valid, splits.test);

  ensure_out_dir(rs.out_dir);
  const std::string agg_path = path_join(rs.out_dir, "ablation.csv");
  const std::string runs_path = path_join(rs.out_dir, "ablation_runs.csv");
  const std::string aggregate = ablation_rows_to_csv(result.rows);
  atomic_write_file(agg_path, aggregate);
  atomic_write_file(runs_path, ablation_cells_to_csv(result.cells));

  std::cout << aggregate;
  std::cout << "wrote " << agg_path << ", " << runs_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GraphMFT: graph-network-based multimodal fusion for conversational emotion recognition"};
  app.require_subcommand(1);
  std::function<int()> action;

  // gen-synth -----------------------------------------------------------
  SynthConfig synth;
  std::string synth_out;
  {
    CLI::App* cmd = app.add_subcommand("gen-synth", "generate a synthetic graphmft-v1 dataset");
    cmd->add_option("--out", synth_out, "output dataset path")->required();
    cmd->add_option("--n-conv", synth.n_conv, "number of conversations")->capture_default_str();
    cmd->add_option("--m-min", synth.m_min, "min utterances per conversation")->capture_default_str();
    cmd->add_option("--m-max", synth.m_max, "max utterances per conversation")->capture_default_str();
    cmd->add_option("--num-speakers", synth.num_speakers, "speaker count")->capture_default_str();
    cmd->add_option("--num-classes", synth.num_classes, "emotion class count")->capture_default_str();
    cmd->add_option("--v-dim", synth.v_dim, "visual feature dim")->capture_default_str();
    cmd->add_option("--a-dim", synth.a_dim, "acoustic feature dim")->capture_default_str();
    cmd->add_option("--t-dim", synth.t_dim, "textual feature dim")->capture_default_str();
    cmd->add_option("--noise-sigma", synth.noise_sigma, "feature noise stddev")->capture_default_str();
    cmd->add_option("--stickiness", synth.transition_stickiness,
                    "probability the next label repeats the previous one")
        ->capture_default_str();
    cmd->add_option("--snr-v", synth.snr_v, "visual prototype strength")->capture_default_str();
    cmd->add_option("--snr-a", synth.snr_a, "acoustic prototype strength")->capture_default_str();
    cmd->add_option("--snr-t", synth.snr_t, "textual prototype strength")->capture_default_str();
    cmd->add_option("--speaker-offset-norm", synth.speaker_offset_norm,
                    "norm of each per-speaker feature offset")
        ->capture_default_str();
    cmd->add_option("--speaker-align", synth.speaker_align,
                    "how much speaker offsets align with class prototypes, 0..1")
        ->capture_default_str();
    cmd->add_option("--seed", synth.seed, "generator seed")->capture_default_str();
    cmd->callback([&] { action = [&] { return cmd_gen_synth(synth, synth_out); }; });
  }

  // graph-dump ----------------------------------------------------------
  std::size_t gd_m = 0, gd_p = 2, gd_f = 2;
  std::string gd_pair, gd_out;
  bool gd_self = true;
  {
    CLI::App* cmd = app.add_subcommand("graph-dump", "build one pair graph and dump its edge list");
    cmd->add_option("--m", gd_m, "utterances in the conversation")->required();
    cmd->add_option("--pair", gd_pair, "modality pair: va, vt, or at")->required();
    cmd->add_option("--p", gd_p, "past window P")->capture_default_str();
    cmd->add_option("--f", gd_f, "future window F")->capture_default_str();
    cmd->add_flag("--self-loops,!--no-self-loops", gd_self, "add self edges (default: true)");
    cmd->add_option("--out", gd_out, "write to file instead of stdout");
    cmd->callback([&] { action = [&] { return cmd_graph_dump(gd_m, gd_pair, gd_p, gd_f, gd_self, gd_out); }; });
  }

  // gradcheck -----------------------------------------------------------
  std::string gc_scope = "model";
  std::uint64_t gc_seed = 1;
  double gc_tol = 0.0;
  {
    CLI::App* cmd = app.add_subcommand(
        "gradcheck", "verify analytic gradients against central differences in both precisions");
    cmd->add_option("--scope", gc_scope, "layers or model")->capture_default_str();
    cmd->add_option("--seed", gc_seed, "fixture seed")->capture_default_str();
    cmd->add_option("--tol", gc_tol,
                    "override tolerance for both precisions (default: 1e-4 f32, 1e-6 f64)");
    cmd->callback([&] { action = [&] { return cmd_gradcheck(gc_scope, gc_seed, gc_tol); }; });
  }

  // train ---------------------------------------------------------------
  SharedOpts train_opts;
  {
    CLI::App* cmd = app.add_subcommand(
        "train", "train a model; writes model.ckpt, history.csv, metrics.json to --out-dir");
    train_opts.add_to(cmd, /*with_data_flags=*/true);
    cmd->callback([&] { action = [&] { return cmd_train(train_opts); }; });
  }

  // eval ----------------------------------------------------------------
  std::string eval_ckpt, eval_data, eval_out_dir = ".";
  {
    CLI::App* cmd = app.add_subcommand(
        "eval", "evaluate a checkpoint; writes metrics.json and confusion.csv to --out-dir");
    cmd->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
    cmd->add_option("--data", eval_data, "dataset file")->required();
    cmd->add_option("--out-dir", eval_out_dir, "output directory")->capture_default_str();
    cmd->callback([&] { action = [&] { return cmd_eval(eval_ckpt, eval_data, eval_out_dir); }; });
  }

  // ablate ----------------------------------------------------------------
  SharedOpts ablate_opts;
  std::string ab_suite, ab_grid;
  std::size_t ab_seeds = 3;
  {
    CLI::App* cmd = app.add_subcommand(
        "ablate", "sweep one factor; writes ablation.csv and ablation_runs.csv to --out-dir");
    cmd->add_option("--suite", ab_suite,
                    "gat_variant, depth, speaker, modalities, or window")
        ->required();
    cmd->add_option("--grid", ab_grid, "comma-separated grid entries")->required();
    cmd->add_option("--seeds", ab_seeds, "seeds per configuration")->capture_default_str();
    ablate_opts.add_to(cmd, /*with_data_flags=*/true);
    cmd->callback([&] { action = [&] { return cmd_ablate(ablate_opts, ab_suite, ab_grid, ab_seeds); }; });
  }

  CLI11_PARSE(app, argc, argv);
  try {
    return action();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
