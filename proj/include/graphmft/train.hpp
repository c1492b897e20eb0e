#pragma once

// Objective, AdamW optimization, the training loop with validation-based
// selection, evaluation, and the ablation sweeps.
//
// The objective's L2 term is realized as AdamW's decoupled weight decay:
// the loss function below returns the data term (mean NLL over all batch
// utterances) only, and the optimizer applies `weight_decay` directly to the
// parameters at each step.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "graphmft/data.hpp"
#include "graphmft/metrics.hpp"
#include "graphmft/model.hpp"
#include "graphmft/tensor.hpp"
#include "graphmft/util.hpp"

namespace graphmft {

// ---------------------------------------------------------------------------
// objective (Eq. 10 data term)

// Mean negative log-likelihood over every utterance in the batch: the summed
// per-utterance -log softmax, divided by the total utterance count.
template <typename Real>
Tensor<Real> batch_loss(const std::vector<Tensor<Real>>& logits_per_conv,
                        const std::vector<std::vector<std::size_t>>& labels_per_conv) {
  if (logits_per_conv.empty() || logits_per_conv.size() != labels_per_conv.size()) {
    throw std::invalid_argument("batch_loss: empty batch or logits/labels count mismatch");
  }
  std::size_t total = 0;
  Tensor<Real> sum;
  for (std::size_t c = 0; c < logits_per_conv.size(); ++c) {
    const auto& logits = logits_per_conv[c];
    const auto& labels = labels_per_conv[c];
    if (logits.rows() != labels.size()) {
      throw std::invalid_argument("batch_loss: conversation " + std::to_string(c) + " has " +
                                  std::to_string(logits.rows()) + " logit rows for " +
                                  std::to_string(labels.size()) + " labels");
    }
    total += labels.size();
    Tensor<Real> picked = pick_per_row(log_softmax(logits, 1), labels);
    Tensor<Real> s = sum_all(picked);
    sum = sum.defined() ? add(sum, s) : s;
  }
  return scale(sum, Real(-1) / Real(total));
}

// ---------------------------------------------------------------------------
// AdamW

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

template <typename Real>
struct AdamWState {
  std::vector<std::vector<Real>> m;
  std::vector<std::vector<Real>> v;
  std::size_t t = 0;

  static AdamWState init(const std::vector<NamedParam<Real>>& params) {
    AdamWState s;
    s.m.reserve(params.size());
    s.v.reserve(params.size());
    for (const auto& p : params) {
      s.m.emplace_back(p.tensor.size(), Real(0));
      s.v.emplace_back(p.tensor.size(), Real(0));
    }
    return s;
  }
};

// Decoupled-decay update:
//   m <- b1*m + (1-b1)*g;  v <- b2*v + (1-b2)*g^2  (bias-corrected)
//   theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay*theta)
template <typename Real>
void adamw_step(std::vector<NamedParam<Real>>& params, AdamWState<Real>& state,
                const AdamWConfig& cfg) {
  if (state.m.size() != params.size()) {
    throw std::invalid_argument("adamw_step: state tracks " + std::to_string(state.m.size()) +
                                " tensors, got " + std::to_string(params.size()));
  }
  for (const auto& p : params) {
    for (Real g : p.tensor.grad()) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw std::runtime_error("adamw_step: non-finite gradient in '" + p.name + "'");
      }
    }
  }

  state.t += 1;
  const Real b1 = Real(cfg.beta1), b2 = Real(cfg.beta2);
  const Real bc1 = Real(1) - Real(std::pow(cfg.beta1, double(state.t)));
  const Real bc2 = Real(1) - Real(std::pow(cfg.beta2, double(state.t)));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& t = params[i].tensor;
    if (state.m[i].size() != t.size()) {
      throw std::invalid_argument("adamw_step: state shape mismatch for '" + params[i].name + "'");
    }
    auto grad = t.grad();
    for (std::size_t j = 0; j < t.size(); ++j) {
      const Real g = grad[j];
      state.m[i][j] = b1 * state.m[i][j] + (Real(1) - b1) * g;
      state.v[i][j] = b2 * state.v[i][j] + (Real(1) - b2) * g * g;
      const Real m_hat = state.m[i][j] / bc1;
      const Real v_hat = state.v[i][j] / bc2;
      t.at(j) -= Real(cfg.lr) * (m_hat / (std::sqrt(v_hat) + Real(cfg.eps)) +
                                 Real(cfg.weight_decay) * t.at(j));
    }
  }
}

// Global-norm gradient clipping; returns the pre-clip norm.
template <typename Real>
double clip_gradients(std::vector<NamedParam<Real>>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    for (Real g : p.tensor.grad()) sq += double(g) * double(g);
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const Real factor = Real(max_norm / norm);
    for (auto& p : params)
      for (Real& g : p.tensor.grad_mut()) g *= factor;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// evaluation

template <typename Real>
Metrics evaluate(const ModelConfig& cfg, const ModelParams<Real>& params, const Dataset& data) {
  if (data.conversations.empty()) throw std::invalid_argument("evaluate: empty dataset");
  std::vector<std::size_t> y_true, y_pred;
  for (const auto& conv : data.conversations) {
    Tensor<Real> logits = model_forward(cfg, params, conv);
    auto pred = predict(logits);
    y_true.insert(y_true.end(), conv.labels.begin(), conv.labels.end());
    y_pred.insert(y_pred.end(), pred.begin(), pred.end());
  }
  return compute_metrics(y_true, y_pred, cfg.num_classes);
}

// ---------------------------------------------------------------------------
// training loop

struct TrainConfig {
  double lr = 1e-3;
  std::size_t batch_size = 8;
  std::size_t max_epochs = 50;
  double l2_lambda = 1e-5;
  std::uint64_t seed = 1;
  std::size_t patience = 0;  // 0 = run all epochs
  double grad_clip = 0.0;    // max global grad norm; 0 = off

  void validate() const {
    if (lr < 0.0) throw std::invalid_argument("train: lr must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
    if (max_epochs < 1) throw std::invalid_argument("train: max_epochs must be >= 1");
    if (l2_lambda < 0.0) throw std::invalid_argument("train: l2_lambda must be >= 0");
    if (grad_clip < 0.0) throw std::invalid_argument("train: grad_clip must be >= 0");
  }
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double loss = 0.0;      // mean train NLL per utterance over the epoch
  double acc = 0.0;       // validation accuracy
  double wf1 = 0.0;       // validation weighted F1
};

inline std::string history_to_csv(const std::vector<EpochRecord>& history) {
  std::string out = "epoch,loss,acc,wf1\n";
  for (const auto& r : history) {
    out += std::to_string(r.epoch) + "," + detail::fmt_double(r.loss) + "," +
           detail::fmt_double(r.acc) + "," + detail::fmt_double(r.wf1) + "\n";
  }
  return out;
}

template <typename Real>
struct TrainResult {
  ModelParams<Real> best_params;
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;  // 0 = never improved past init
  double best_wf1 = -1.0;
  bool diverged = false;
};

// Epoch loop over seeded shuffled conversation batches; per-epoch validation
// metrics; returns the parameters of the best validation weighted-F1 epoch
// (ties keep the earlier epoch). Non-finite loss or gradients abort the loop,
// returning the best parameters seen so far.
template <typename Real>
TrainResult<Real> train(const ModelConfig& mcfg, const TrainConfig& tcfg,
                        const Dataset& train_set, const Dataset& valid_set) {
  mcfg.validate();
  tcfg.validate();
  if (train_set.conversations.empty() || valid_set.conversations.empty()) {
    throw std::invalid_argument("train: train and valid splits must be nonempty");
  }

  ModelParams<Real> params = make_params<Real>(mcfg, derive_seed(tcfg.seed, "init"));
  auto named = named_params(params);
  auto opt_state = AdamWState<Real>::init(named);
  AdamWConfig opt_cfg;
  opt_cfg.lr = tcfg.lr;
  opt_cfg.weight_decay = tcfg.l2_lambda;

  Rng dropout_rng(derive_seed(tcfg.seed, "train/dropout"));

  TrainResult<Real> result;
  result.best_params = clone_params(mcfg, params);

  const std::size_t n = train_set.conversations.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 1; epoch <= tcfg.max_epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(tcfg.seed, "train/shuffle/epoch" + std::to_string(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng.engine());

    double epoch_nll = 0.0;
    std::size_t epoch_utts = 0;
    for (std::size_t start = 0; start < n; start += tcfg.batch_size) {
      const std::size_t end = std::min(n, start + tcfg.batch_size);
      std::vector<Tensor<Real>> logits;
      std::vector<std::vector<std::size_t>> labels;
      std::size_t batch_utts = 0;
      ForwardOptions<Real> opts;
      opts.training = true;
      opts.rng = &dropout_rng;
      for (std::size_t b = start; b < end; ++b) {
        const Conversation& conv = train_set.conversations[order[b]];
        logits.push_back(model_forward(mcfg, params, conv, opts));
        labels.push_back(conv.labels);
        batch_utts += conv.length();
      }
      Tensor<Real> loss = batch_loss(logits, labels);
      const double loss_value = static_cast<double>(loss.item());
      if (!std::isfinite(loss_value)) {
        result.diverged = true;
        return result;
      }
      epoch_nll += loss_value * static_cast<double>(batch_utts);
      epoch_utts += batch_utts;

      for (auto& p : named) p.tensor.zero_grad();
      backward(loss);
      if (tcfg.grad_clip > 0.0) clip_gradients(named, tcfg.grad_clip);
      try {
        adamw_step(named, opt_state, opt_cfg);
      } catch (const std::runtime_error&) {
        result.diverged = true;
        return result;
      }
    }

    Metrics valid = evaluate(mcfg, params, valid_set);
    result.history.push_back(
        {epoch, epoch_nll / static_cast<double>(epoch_utts), valid.accuracy, valid.weighted_f1});
    if (valid.weighted_f1 > result.best_wf1) {
      result.best_wf1 = valid.weighted_f1;
      result.best_epoch = epoch;
      result.best_params = clone_params(mcfg, params);
    }
    if (tcfg.patience > 0 && epoch >= result.best_epoch + tcfg.patience) break;
  }
  return result;
}

// ---------------------------------------------------------------------------
// ablation sweeps

enum class AblationSuite { GatVariant, Depth, Speaker, Modalities, Window };

inline const char* ablation_suite_name(AblationSuite s) {
  switch (s) {
    case AblationSuite::GatVariant: return "gat_variant";
    case AblationSuite::Depth: return "depth";
    case AblationSuite::Speaker: return "speaker";
    case AblationSuite::Modalities: return "modalities";
    case AblationSuite::Window: return "window";
  }
  throw std::logic_error("ablation_suite_name: bad enum");
}

inline AblationSuite ablation_suite_from_name(const std::string& s) {
  if (s == "gat_variant") return AblationSuite::GatVariant;
  if (s == "depth") return AblationSuite::Depth;
  if (s == "speaker") return AblationSuite::Speaker;
  if (s == "modalities") return AblationSuite::Modalities;
  if (s == "window") return AblationSuite::Window;
  throw std::invalid_argument("unknown ablation suite '" + s +
                              "' (expected gat_variant, depth, speaker, modalities, or window)");
}

struct AblationCell {
  std::string config;
  std::uint64_t seed = 0;
  Metrics metrics;
  bool failed = false;
  std::string error;
};

struct AblationRow {
  std::string config;
  std::size_t seeds = 0;  // successful runs aggregated
  double acc_mean = 0.0, acc_stdev = 0.0;
  double wf1_mean = 0.0, wf1_stdev = 0.0;
};

struct AblationResult {
  std::vector<AblationCell> cells;
  std::vector<AblationRow> rows;
};

namespace detail {

inline std::pair<double, double> mean_stdev(const std::vector<double>& xs) {
  if (xs.empty()) return {0.0, 0.0};
  const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / double(xs.size());
  if (xs.size() < 2) return {mean, 0.0};
  double sq = 0.0;
  for (double x : xs) sq += (x - mean) * (x - mean);
  return {mean, std::sqrt(sq / double(xs.size() - 1))};
}

}  // namespace detail

// Expand one grid entry into the model configs it names (label, config).
inline std::vector<std::pair<std::string, ModelConfig>> ablation_cell_configs(
    AblationSuite suite, const ModelConfig& base, const std::string& entry) {
  switch (suite) {
    case AblationSuite::GatVariant: {
      ModelConfig c = base;
      c.gat_variant = gat_variant_from_name(entry);
      return {{entry, c}};
    }
    case AblationSuite::Depth: {
      const std::size_t depth = static_cast<std::size_t>(std::stoull(entry));
      std::vector<std::pair<std::string, ModelConfig>> out;
      for (GatVariant v : {GatVariant::Improved, GatVariant::Vanilla}) {
        ModelConfig c = base;
        c.layers = depth;
        c.gat_variant = v;
        out.emplace_back(std::string(gat_variant_name(v)) + "-d" + entry, c);
      }
      return out;
    }
    case AblationSuite::Speaker: {
      ModelConfig c = base;
      if (entry == "with") c.use_speaker = true;
      else if (entry == "without") c.use_speaker = false;
      else throw std::invalid_argument("speaker suite: entry '" + entry +
                                       "' (expected with or without)");
      return {{entry, c}};
    }
    case AblationSuite::Modalities: {
      ModelConfig c = base;
      c.modalities = ModalitySet::parse(entry);
      return {{entry, c}};
    }
    case AblationSuite::Window: {
      const std::size_t w = static_cast<std::size_t>(std::stoull(entry));
      ModelConfig c = base;
      c.window_p = c.window_f = w;
      return {{"p" + entry + "f" + entry, c}};
    }
  }
  throw std::logic_error("ablation_cell_configs: bad enum");
}

// Runs |grid| x (cell expansion) x num_seeds trainings; each cell trains on
// train/valid and reports test metrics of the selected parameters. A failing
// cell is recorded and skipped in the aggregates; the grid continues.
template <typename Real>
AblationResult run_ablation(AblationSuite suite, const ModelConfig& base_model,
                            const TrainConfig& base_train, const std::vector<std::string>& grid,
                            std::size_t num_seeds, const Dataset& train_set,
                            const Dataset& valid_set, const Dataset& test_set) {
  if (grid.empty()) throw std::invalid_argument("ablation: empty grid");
  if (num_seeds < 1) throw std::invalid_argument("ablation: need at least one seed");

  AblationResult result;
  for (const auto& entry : grid) {
    for (const auto& [label, mcfg] : ablation_cell_configs(suite, base_model, entry)) {
      std::vector<double> accs, wf1s;
      for (std::size_t k = 0; k < num_seeds; ++k) {
        AblationCell cell;
        cell.config = label;
        cell.seed = base_train.seed + k;
        try {
          TrainConfig tcfg = base_train;
          tcfg.seed = cell.seed;
          auto trained = train<Real>(mcfg, tcfg, train_set, valid_set);
          cell.metrics = evaluate(mcfg, trained.best_params, test_set);
          accs.push_back(cell.metrics.accuracy);
          wf1s.push_back(cell.metrics.weighted_f1);
        } catch (const std::exception& e) {
          cell.failed = true;
          cell.error = e.what();
        }
        result.cells.push_back(std::move(cell));
      }
      AblationRow row;
      row.config = label;
      row.seeds = accs.size();
      std::tie(row.acc_mean, row.acc_stdev) = detail::mean_stdev(accs);
      std::tie(row.wf1_mean, row.wf1_stdev) = detail::mean_stdev(wf1s);
      result.rows.push_back(std::move(row));
    }
  }
  return result;
}

// Aggregate table: one row per configuration, mean and stdev over seeds.
inline std::string ablation_rows_to_csv(const std::vector<AblationRow>& rows) {
  std::string out = "config,seeds,acc_mean,acc_stdev,wf1_mean,wf1_stdev\n";
  for (const auto& r : rows) {
    out += r.config + "," + std::to_string(r.seeds) + "," + detail::fmt_double(r.acc_mean) + "," +
           detail::fmt_double(r.acc_stdev) + "," + detail::fmt_double(r.wf1_mean) + "," +
           detail::fmt_double(r.wf1_stdev) + "\n";
  }
  return out;
}

// Per-run table: one row per (configuration, seed) training.
inline std::string ablation_cells_to_csv(const std::vector<AblationCell>& cells) {
  std::string out = "config,seed,acc,wf1\n";
  for (const auto& c : cells) {
    if (c.failed) {
      out += c.config + "," + std::to_string(c.seed) + ",error,error\n";
    } else {
      out += c.config + "," + std::to_string(c.seed) + "," +
             detail::fmt_double(c.metrics.accuracy) + "," +
             detail::fmt_double(c.metrics.weighted_f1) + "\n";
    }
  }
  return out;
}

}  // namespace graphmft
