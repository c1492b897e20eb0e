#pragma once

// The assembled model: unimodal encoders -> shared speaker embedding -> three
// pairwise graph-attention stacks -> same-modality summation -> fused
// projection -> two-layer classifier. Parameters live in a structured record
// with a stable dotted name per tensor; checkpoints serialize those names,
// shapes, and 32-bit values behind a digest.

#include <array>
#include <cstddef>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "graphmft/data.hpp"
#include "graphmft/gradcheck.hpp"
#include "graphmft/graph.hpp"
#include "graphmft/layers.hpp"
#include "graphmft/tensor.hpp"
#include "graphmft/util.hpp"

namespace graphmft {

// ---------------------------------------------------------------------------
// configuration

struct ModalitySet {
  bool v = true;
  bool a = true;
  bool t = true;

  std::size_t count() const { return std::size_t(v) + std::size_t(a) + std::size_t(t); }

  bool has(Modality m) const {
    switch (m) {
      case Modality::V: return v;
      case Modality::A: return a;
      case Modality::T: return t;
    }
    throw std::logic_error("ModalitySet::has: bad enum");
  }

  bool has_pair(Pair p) const {
    const auto mods = pair_modalities(p);
    return has(mods[0]) && has(mods[1]);
  }

  std::string str() const {
    std::string s;
    if (v) s += 'v';
    if (a) s += 'a';
    if (t) s += 't';
    return s;
  }

  static ModalitySet parse(const std::string& s) {
    ModalitySet m{false, false, false};
    for (char c : s) {
      switch (c) {
        case 'v':
          if (m.v) throw std::invalid_argument("modalities: duplicate 'v' in '" + s + "'");
          m.v = true;
          break;
        case 'a':
          if (m.a) throw std::invalid_argument("modalities: duplicate 'a' in '" + s + "'");
          m.a = true;
          break;
        case 't':
          if (m.t) throw std::invalid_argument("modalities: duplicate 't' in '" + s + "'");
          m.t = true;
          break;
        default:
          throw std::invalid_argument("modalities: unknown modality '" + std::string(1, c) +
                                      "' in '" + s + "' (use a subset of \"vat\")");
      }
    }
    if (m.count() < 2) {
      throw std::invalid_argument("modalities: need at least two of {v,a,t}, got '" + s + "'");
    }
    return m;
  }

  friend bool operator==(const ModalitySet&, const ModalitySet&) = default;
};

enum class GatVariant { Improved, Vanilla };

inline const char* gat_variant_name(GatVariant v) {
  return v == GatVariant::Improved ? "improved" : "vanilla";
}

inline GatVariant gat_variant_from_name(const std::string& s) {
  if (s == "improved") return GatVariant::Improved;
  if (s == "vanilla") return GatVariant::Vanilla;
  throw std::invalid_argument("unknown gat variant '" + s + "' (expected improved or vanilla)");
}

struct ModelConfig {
  std::size_t d = 128;        // common hidden width
  std::size_t heads = 4;      // attention heads K
  std::size_t layers = 3;     // stack depth L
  std::size_t rnn_hidden = 64;  // recurrent hidden size h
  std::size_t window_p = 2;   // past context P
  std::size_t window_f = 2;   // future context F
  bool self_loops = true;
  double dropout = 0.5;
  std::size_t num_classes = 0;
  std::size_t num_speakers = 0;
  std::size_t v_dim = 0;
  std::size_t a_dim = 0;
  std::size_t t_dim = 0;
  bool use_speaker = true;
  ModalitySet modalities{};
  GatVariant gat_variant = GatVariant::Improved;

  std::size_t head_dim() const { return d / heads; }

  void validate() const {
    if (d < 1 || heads < 1) throw std::invalid_argument("model: d and heads must be >= 1");
    if (d % heads != 0) {
      throw std::invalid_argument("model: d (" + std::to_string(d) + ") must be divisible by heads (" +
                                  std::to_string(heads) + ")");
    }
    if (rnn_hidden < 1) throw std::invalid_argument("model: rnn_hidden must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0) {
      throw std::invalid_argument("model: dropout must be in [0,1)");
    }
    if (num_classes < 2) throw std::invalid_argument("model: num_classes must be >= 2");
    if (num_speakers < 1) throw std::invalid_argument("model: num_speakers must be >= 1");
    if (v_dim < 1 || a_dim < 1 || t_dim < 1) {
      throw std::invalid_argument("model: modality dims must be >= 1");
    }
    if (modalities.count() < 2) {
      throw std::invalid_argument("model: need at least two modalities");
    }
  }

  void adopt_header(const DatasetHeader& h) {
    num_classes = h.num_classes;
    num_speakers = h.num_speakers;
    v_dim = h.v_dim;
    a_dim = h.a_dim;
    t_dim = h.t_dim;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline nlohmann::ordered_json model_config_to_json(const ModelConfig& c) {
  return nlohmann::ordered_json{{"d", c.d},
                                {"heads", c.heads},
                                {"layers", c.layers},
                                {"rnn_hidden", c.rnn_hidden},
                                {"window_p", c.window_p},
                                {"window_f", c.window_f},
                                {"self_loops", c.self_loops},
                                {"dropout", c.dropout},
                                {"num_classes", c.num_classes},
                                {"num_speakers", c.num_speakers},
                                {"v_dim", c.v_dim},
                                {"a_dim", c.a_dim},
                                {"t_dim", c.t_dim},
                                {"use_speaker", c.use_speaker},
                                {"modalities", c.modalities.str()},
                                {"gat_variant", gat_variant_name(c.gat_variant)}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  const std::string where = "model config";
  c.d = detail::json_field<std::size_t>(j, "d", where);
  c.heads = detail::json_field<std::size_t>(j, "heads", where);
  c.layers = detail::json_field<std::size_t>(j, "layers", where);
  c.rnn_hidden = detail::json_field<std::size_t>(j, "rnn_hidden", where);
  c.window_p = detail::json_field<std::size_t>(j, "window_p", where);
  c.window_f = detail::json_field<std::size_t>(j, "window_f", where);
  c.self_loops = detail::json_field<bool>(j, "self_loops", where);
  c.dropout = detail::json_field<double>(j, "dropout", where);
  c.num_classes = detail::json_field<std::size_t>(j, "num_classes", where);
  c.num_speakers = detail::json_field<std::size_t>(j, "num_speakers", where);
  c.v_dim = detail::json_field<std::size_t>(j, "v_dim", where);
  c.a_dim = detail::json_field<std::size_t>(j, "a_dim", where);
  c.t_dim = detail::json_field<std::size_t>(j, "t_dim", where);
  c.use_speaker = detail::json_field<bool>(j, "use_speaker", where);
  c.modalities = ModalitySet::parse(detail::json_field<std::string>(j, "modalities", where));
  c.gat_variant = gat_variant_from_name(detail::json_field<std::string>(j, "gat_variant", where));
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// parameters

template <typename Real>
struct ModelParams {
  AffineLayer<Real> enc_v;
  AffineLayer<Real> enc_a;
  BiRecurrentEncoder<Real> enc_t;
  EmbeddingTable<Real> speaker;
  ImprovedGATStack<Real> stack_va;
  ImprovedGATStack<Real> stack_vt;
  ImprovedGATStack<Real> stack_at;
  AffineLayer<Real> w_vat;
  AffineLayer<Real> cls_hidden;  // W_c, b_c
  AffineLayer<Real> cls_out;     // W'_c, b'_c

  ImprovedGATStack<Real>& stack(Pair p) {
    switch (p) {
      case Pair::VA: return stack_va;
      case Pair::VT: return stack_vt;
      case Pair::AT: return stack_at;
    }
    throw std::logic_error("ModelParams::stack: bad enum");
  }
  const ImprovedGATStack<Real>& stack(Pair p) const {
    return const_cast<ModelParams*>(this)->stack(p);
  }
};

// Stable (name, tensor) enumeration. Tensor handles share storage with the
// structured record, so mutating through either view is equivalent.
template <typename Real>
std::vector<NamedParam<Real>> named_params(ModelParams<Real>& p) {
  std::vector<NamedParam<Real>> out;
  auto affine = [&](const std::string& prefix, AffineLayer<Real>& l) {
    out.push_back({prefix + ".W", l.W});
    out.push_back({prefix + ".b", l.b});
  };
  affine("enc.v", p.enc_v);
  affine("enc.a", p.enc_a);
  auto direction = [&](const std::string& prefix, LstmDirection<Real>& d) {
    out.push_back({prefix + ".wi", d.wi});
    out.push_back({prefix + ".ui", d.ui});
    out.push_back({prefix + ".bi", d.bi});
    out.push_back({prefix + ".wf", d.wf});
    out.push_back({prefix + ".uf", d.uf});
    out.push_back({prefix + ".bf", d.bf});
    out.push_back({prefix + ".wo", d.wo});
    out.push_back({prefix + ".uo", d.uo});
    out.push_back({prefix + ".bo", d.bo});
    out.push_back({prefix + ".wg", d.wg});
    out.push_back({prefix + ".ug", d.ug});
    out.push_back({prefix + ".bg", d.bg});
  };
  direction("enc.t.fw", p.enc_t.fw);
  direction("enc.t.bw", p.enc_t.bw);
  affine("enc.t.proj", p.enc_t.proj);
  out.push_back({"speaker.E", p.speaker.E});
  for (Pair pair : {Pair::VA, Pair::VT, Pair::AT}) {
    const std::string base = "stack." + pair_name(pair);
    auto& stack = p.stack(pair);
    for (std::size_t l = 0; l < stack.layers.size(); ++l) {
      for (std::size_t k = 0; k < stack.layers[l].heads.size(); ++k) {
        const std::string head = base + ".l" + std::to_string(l) + ".h" + std::to_string(k);
        out.push_back({head + ".W", stack.layers[l].heads[k].W});
        out.push_back({head + ".a", stack.layers[l].heads[k].a});
      }
    }
    affine(base + ".wim", stack.w_im);
  }
  affine("fuse.wvat", p.w_vat);
  affine("cls.hidden", p.cls_hidden);
  affine("cls.out", p.cls_out);
  return out;
}

namespace detail {

template <typename Real>
Tensor<Real> init_weight(const std::string& name, Shape shape, std::size_t fan_in,
                         std::uint64_t init_seed) {
  auto t = Tensor<Real>::zeros(std::move(shape), /*requires_grad=*/true);
  Rng rng(derive_seed(init_seed, "init/" + name));
  init_uniform_fan_in(t, rng, fan_in);
  return t;
}

template <typename Real>
AffineLayer<Real> init_affine(const std::string& name, std::size_t d_out, std::size_t d_in,
                              std::uint64_t seed) {
  AffineLayer<Real> l;
  l.W = init_weight<Real>(name + ".W", {d_out, d_in}, d_in, seed);
  l.b = Tensor<Real>::zeros({d_out}, /*requires_grad=*/true);
  return l;
}

template <typename Real>
LstmDirection<Real> init_lstm_direction(const std::string& name, std::size_t h, std::size_t d_in,
                                        std::uint64_t seed) {
  LstmDirection<Real> d;
  auto gate = [&](const char* g, Tensor<Real>& w, Tensor<Real>& u, Tensor<Real>& b) {
    w = init_weight<Real>(name + ".w" + g, {h, d_in}, d_in, seed);
    u = init_weight<Real>(name + ".u" + g, {h, h}, h, seed);
    b = Tensor<Real>::zeros({h}, /*requires_grad=*/true);
  };
  gate("i", d.wi, d.ui, d.bi);
  gate("f", d.wf, d.uf, d.bf);
  gate("o", d.wo, d.uo, d.bo);
  gate("g", d.wg, d.ug, d.bg);
  return d;
}

template <typename Real>
ImprovedGATStack<Real> init_stack(const std::string& name, const ModelConfig& cfg,
                                  std::uint64_t seed) {
  ImprovedGATStack<Real> s;
  const std::size_t dk = cfg.head_dim();
  s.layers.resize(cfg.layers);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    s.layers[l].heads.resize(cfg.heads);
    for (std::size_t k = 0; k < cfg.heads; ++k) {
      const std::string head = name + ".l" + std::to_string(l) + ".h" + std::to_string(k);
      s.layers[l].heads[k].W = init_weight<Real>(head + ".W", {dk, cfg.d}, cfg.d, seed);
      s.layers[l].heads[k].a = init_weight<Real>(head + ".a", {2 * dk}, 2 * dk, seed);
    }
  }
  s.w_im = init_affine<Real>(name + ".wim", cfg.d, (cfg.layers + 1) * cfg.d, seed);
  return s;
}

}  // namespace detail

template <typename Real>
ModelParams<Real> make_params(const ModelConfig& cfg, std::uint64_t init_seed) {
  cfg.validate();
  ModelParams<Real> p;
  p.enc_v = detail::init_affine<Real>("enc.v", cfg.d, cfg.v_dim, init_seed);
  p.enc_a = detail::init_affine<Real>("enc.a", cfg.d, cfg.a_dim, init_seed);
  p.enc_t.fw = detail::init_lstm_direction<Real>("enc.t.fw", cfg.rnn_hidden, cfg.t_dim, init_seed);
  p.enc_t.bw = detail::init_lstm_direction<Real>("enc.t.bw", cfg.rnn_hidden, cfg.t_dim, init_seed);
  p.enc_t.proj = detail::init_affine<Real>("enc.t.proj", cfg.d, 2 * cfg.rnn_hidden, init_seed);
  p.speaker.E = Tensor<Real>::zeros({cfg.num_speakers, cfg.d}, /*requires_grad=*/true);
  {
    Rng rng(derive_seed(init_seed, "init/speaker.E"));
    init_normal(p.speaker.E, rng, 0.02);
  }
  p.stack_va = detail::init_stack<Real>("stack.va", cfg, init_seed);
  p.stack_vt = detail::init_stack<Real>("stack.vt", cfg, init_seed);
  p.stack_at = detail::init_stack<Real>("stack.at", cfg, init_seed);
  p.w_vat = detail::init_affine<Real>("fuse.wvat", cfg.d, cfg.modalities.count() * cfg.d, init_seed);
  p.cls_hidden = detail::init_affine<Real>("cls.hidden", cfg.d, cfg.d, init_seed);
  p.cls_out = detail::init_affine<Real>("cls.out", cfg.num_classes, cfg.d, init_seed);
  return p;
}

// Deep value copy: fresh leaf tensors with the source's values.
template <typename Real>
ModelParams<Real> clone_params(const ModelConfig& cfg, const ModelParams<Real>& src) {
  ModelParams<Real> dst = make_params<Real>(cfg, /*init_seed=*/0);
  auto src_named = named_params(const_cast<ModelParams<Real>&>(src));
  auto dst_named = named_params(dst);
  for (std::size_t i = 0; i < dst_named.size(); ++i) {
    std::copy(src_named[i].tensor.values().begin(), src_named[i].tensor.values().end(),
              dst_named[i].tensor.data());
  }
  return dst;
}

// ---------------------------------------------------------------------------
// forward pass

template <typename Real>
struct ForwardOptions {
  bool training = false;
  Rng* rng = nullptr;  // dropout stream; required when training with dropout > 0
  std::vector<AttnRecord<Real>>* attn_probe = nullptr;
  // When set, receives each enabled modality's fused H^tau (post Eq. 7).
  std::map<char, std::vector<Real>>* h_probe = nullptr;
  // Activation-kink inputs for finite-difference fixtures, split by type:
  // pre-LeakyReLU attention scores and the classifier's pre-ReLU values.
  std::vector<Real>* attn_kink_probe = nullptr;
  std::vector<Real>* relu_kink_probe = nullptr;
};

namespace detail {

template <typename Real>
Tensor<Real> feature_tensor(const std::vector<std::vector<double>>& rows, std::size_t dim) {
  std::vector<Real> flat;
  flat.reserve(rows.size() * dim);
  for (const auto& r : rows)
    for (double v : r) flat.push_back(static_cast<Real>(v));
  return Tensor<Real>::from({rows.size(), dim}, std::move(flat));
}

}  // namespace detail

// Eq. 1: affine encoders for V and A, bidirectional recurrence for T.
template <typename Real>
std::array<Tensor<Real>, 3> encode(const ModelConfig& cfg, const ModelParams<Real>& params,
                                   const Conversation& conv) {
  const std::size_t m = conv.length();
  if (conv.v[0].size() != cfg.v_dim || conv.a[0].size() != cfg.a_dim ||
      conv.t[0].size() != cfg.t_dim) {
    throw std::invalid_argument("encode: conversation dims (" + std::to_string(conv.v[0].size()) +
                                "," + std::to_string(conv.a[0].size()) + "," +
                                std::to_string(conv.t[0].size()) + ") do not match model (" +
                                std::to_string(cfg.v_dim) + "," + std::to_string(cfg.a_dim) + "," +
                                std::to_string(cfg.t_dim) + ")");
  }
  Tensor<Real> xv = affine_forward(params.enc_v, detail::feature_tensor<Real>(conv.v, cfg.v_dim));
  Tensor<Real> xa = affine_forward(params.enc_a, detail::feature_tensor<Real>(conv.a, cfg.a_dim));
  Tensor<Real> xt = birecurrent_forward(params.enc_t, detail::feature_tensor<Real>(conv.t, cfg.t_dim));
  (void)m;
  return {xv, xa, xt};
}

// Eq. 2: add the shared speaker row to every modality. Identity when
// use_speaker is off.
template <typename Real>
Tensor<Real> add_speaker(const ModelConfig& cfg, const ModelParams<Real>& params,
                         const Tensor<Real>& x, const std::vector<std::size_t>& speakers) {
  if (!cfg.use_speaker) return x;
  for (std::size_t s : speakers) {
    if (s >= cfg.num_speakers) {
      throw std::out_of_range("add_speaker: speaker " + std::to_string(s) + " out of range (" +
                              std::to_string(cfg.num_speakers) + " speakers)");
    }
  }
  return add(x, speaker_embed(params.speaker, speakers));
}

template <typename Real>
Tensor<Real> model_forward(const ModelConfig& cfg, const ModelParams<Real>& params,
                           const Conversation& conv, ForwardOptions<Real> opts = {}) {
  const std::size_t m = conv.length();
  auto enc = encode(cfg, params, conv);
  std::array<Tensor<Real>, 3> x;  // indexed by Modality enum order V,A,T
  const std::array<Modality, 3> mods{Modality::V, Modality::A, Modality::T};
  for (std::size_t i = 0; i < 3; ++i) {
    if (!cfg.modalities.has(mods[i])) continue;
    x[i] = add_speaker(cfg, params, enc[i], conv.speakers);
  }

  GatForwardOptions<Real> gat_opts;
  gat_opts.training = opts.training;
  gat_opts.dropout = cfg.dropout;
  gat_opts.rng = opts.rng;
  gat_opts.probe = opts.attn_probe;
  gat_opts.kink_probe = opts.attn_kink_probe;

  // One graph per enabled modality pair; each output splits into halves that
  // accumulate into their modality's H^tau (Eq. 7).
  std::array<Tensor<Real>, 3> h_sum;
  for (Pair pair : {Pair::VA, Pair::VT, Pair::AT}) {
    if (!cfg.modalities.has_pair(pair)) continue;
    const auto pm = pair_modalities(pair);
    const std::size_t i0 = static_cast<std::size_t>(pm[0]);
    const std::size_t i1 = static_cast<std::size_t>(pm[1]);
    PairGraph graph = build_pair_graph(m, pair, cfg.window_p, cfg.window_f, cfg.self_loops);
    Tensor<Real> stacked = concat<Real>({x[i0], x[i1]}, 0);  // [2m x d]
    Tensor<Real> out = cfg.gat_variant == GatVariant::Improved
                           ? improved_gat_forward(params.stack(pair), stacked, graph, gat_opts)
                           : vanilla_gat_forward(params.stack(pair), stacked, graph, gat_opts);
    Tensor<Real> half0 = slice(out, 0, 0, m);
    Tensor<Real> half1 = slice(out, 0, m, m);
    h_sum[i0] = h_sum[i0].defined() ? add(h_sum[i0], half0) : half0;
    h_sum[i1] = h_sum[i1].defined() ? add(h_sum[i1], half1) : half1;
  }

  std::vector<Tensor<Real>> enabled;
  for (std::size_t i = 0; i < 3; ++i) {
    if (!cfg.modalities.has(mods[i])) continue;
    if (opts.h_probe != nullptr) {
      (*opts.h_probe)[modality_char(mods[i])] =
          std::vector<Real>(h_sum[i].values().begin(), h_sum[i].values().end());
    }
    enabled.push_back(h_sum[i]);
  }

  // Eq. 8: concatenate and project; Eq. 9: two-layer classifier (softmax is
  // folded into the loss / prediction).
  Tensor<Real> fused = affine_forward(params.w_vat, concat(enabled, 1));
  Tensor<Real> hidden = affine_forward(params.cls_hidden, fused);
  if (opts.relu_kink_probe != nullptr) {
    opts.relu_kink_probe->insert(opts.relu_kink_probe->end(), hidden.values().begin(),
                                 hidden.values().end());
  }
  Tensor<Real> z = relu(hidden);
  return affine_forward(params.cls_out, z);
}

// Row-wise argmax; ties break toward the smaller class index.
template <typename Real>
std::vector<std::size_t> predict(const Tensor<Real>& logits) {
  detail::require_rank2(logits, "predict");
  std::vector<std::size_t> out(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < logits.cols(); ++j) {
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    }
    out[i] = best;
  }
  return out;
}

// ---------------------------------------------------------------------------
// checkpoint container `graphmft-ckpt-v1`
//
// Layout (little-endian):
//   magic line  "graphmft-ckpt-v1\n"
//   u32 config_len, config JSON (the full ModelConfig)
//   u64 tensor count
//   per tensor: u32 name_len, name bytes, u32 rank, u64 dims..., f32 values
//   u64 FNV-1a digest of every preceding byte

inline constexpr const char* kCkptMagic = "graphmft-ckpt-v1\n";

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

class CkptReader {
 public:
  CkptReader(const std::string& bytes, const std::string& path)
      : bytes_(bytes), path_(path) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(bytes_[pos_++])) << (8 * i);
    return v;
  }

  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(std::uint8_t(bytes_[pos_++])) << (8 * i);
    return v;
  }

  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }

  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw std::runtime_error("checkpoint '" + path_ + "' is corrupt: truncated at byte " +
                               std::to_string(pos_));
    }
  }

 private:
  const std::string& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

template <typename Real>
void save_checkpoint(const ModelConfig& cfg, const ModelParams<Real>& params,
                     const std::string& path) {
  std::string out(kCkptMagic);
  const std::string cfg_json = model_config_to_json(cfg).dump();
  detail::put_u32(out, static_cast<std::uint32_t>(cfg_json.size()));
  out += cfg_json;

  auto named = named_params(const_cast<ModelParams<Real>&>(params));
  detail::put_u64(out, named.size());
  for (const auto& np : named) {
    detail::put_u32(out, static_cast<std::uint32_t>(np.name.size()));
    out += np.name;
    detail::put_u32(out, static_cast<std::uint32_t>(np.tensor.rank()));
    for (std::size_t d : np.tensor.shape()) detail::put_u64(out, d);
    for (std::size_t i = 0; i < np.tensor.size(); ++i)
      detail::put_f32(out, static_cast<float>(np.tensor.at(i)));
  }
  detail::put_u64(out, fnv1a64(out.data(), out.size()));
  atomic_write_file(path, out);
}

struct Checkpoint {
  ModelConfig cfg;
  ModelParams<float> params;
};

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  const std::size_t magic_len = std::string(kCkptMagic).size();
  if (bytes.size() < magic_len + 8 || bytes.compare(0, magic_len, kCkptMagic) != 0) {
    throw std::runtime_error("checkpoint '" + path + "' is corrupt: bad magic");
  }
  const std::uint64_t stored_digest = [&] {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= std::uint64_t(std::uint8_t(bytes[bytes.size() - 8 + i])) << (8 * i);
    return v;
  }();
  if (fnv1a64(bytes.data(), bytes.size() - 8) != stored_digest) {
    throw std::runtime_error("checkpoint '" + path + "' is corrupt: digest mismatch");
  }

  detail::CkptReader r(bytes, path);
  r.str(magic_len);
  const std::uint32_t cfg_len = r.u32();
  nlohmann::json cfg_json;
  try {
    cfg_json = nlohmann::json::parse(r.str(cfg_len));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("checkpoint '" + path + "' is corrupt: bad config block: " + e.what());
  }

  Checkpoint ck{model_config_from_json(cfg_json), {}};
  ck.params = make_params<float>(ck.cfg, /*init_seed=*/0);

  auto named = named_params(ck.params);
  std::map<std::string, Tensor<float>*> by_name;
  for (auto& np : named) by_name[np.name] = &np.tensor;

  const std::uint64_t count = r.u64();
  if (count != named.size()) {
    throw std::runtime_error("checkpoint '" + path + "': has " + std::to_string(count) +
                             " tensors, config requires " + std::to_string(named.size()));
  }
  std::map<std::string, bool> seen;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = r.u32();
    const std::string name = r.str(name_len);
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw std::runtime_error("checkpoint '" + path + "': unknown tensor '" + name + "'");
    }
    if (seen[name]) {
      throw std::runtime_error("checkpoint '" + path + "': duplicate tensor '" + name + "'");
    }
    seen[name] = true;
    Tensor<float>& t = *it->second;
    const std::uint32_t rank = r.u32();
    Shape shape(rank);
    for (auto& d : shape) d = r.u64();
    if (shape != t.shape()) {
      throw std::runtime_error("checkpoint '" + path + "': tensor '" + name + "' has shape " +
                               shape_str(shape) + ", config requires " + shape_str(t.shape()));
    }
    for (std::size_t j = 0; j < t.size(); ++j) t.at(j) = r.f32();
  }
  if (r.remaining() != 8) {
    throw std::runtime_error("checkpoint '" + path + "' is corrupt: trailing bytes");
  }
  return ck;
}

}  // namespace graphmft
