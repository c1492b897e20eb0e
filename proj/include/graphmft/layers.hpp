#pragma once

// Learnable building blocks: affine layer, speaker embedding table, the
// bidirectional gated recurrent encoder, the multi-head graph attention
// layer, and the improved-GAT stack (residual adds + all-layer concatenation
// behind a projection). A "vanilla" stack forward — plain sequential
// composition of the same layers — exists as the ablation baseline.

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "graphmft/graph.hpp"
#include "graphmft/tensor.hpp"
#include "graphmft/util.hpp"

namespace graphmft {

inline constexpr double kAttnLeakySlope = 0.2;  // LeakyReLU slope inside attention scores

// ---------------------------------------------------------------------------
// affine

template <typename Real>
struct AffineLayer {
  Tensor<Real> W;  // [d_out x d_in]
  Tensor<Real> b;  // [d_out]
};

template <typename Real>
Tensor<Real> affine_forward(const AffineLayer<Real>& layer, const Tensor<Real>& x) {
  return linear(x, layer.W, layer.b);
}

// ---------------------------------------------------------------------------
// speaker embedding

template <typename Real>
struct EmbeddingTable {
  Tensor<Real> E;  // [num_speakers x d]
};

template <typename Real>
Tensor<Real> speaker_embed(const EmbeddingTable<Real>& table,
                           const std::vector<std::size_t>& speakers) {
  return gather_rows(table.E, speakers);
}

// ---------------------------------------------------------------------------
// bidirectional recurrent encoder (gated LSTM cells, zero initial state)

template <typename Real>
struct LstmDirection {
  // Gate order: input (i), forget (f), output (o), candidate (g). Each gate
  // has input weights [h x d_in], recurrent weights [h x h], and bias [h].
  Tensor<Real> wi, ui, bi;
  Tensor<Real> wf, uf, bf;
  Tensor<Real> wo, uo, bo;
  Tensor<Real> wg, ug, bg;
};

template <typename Real>
struct BiRecurrentEncoder {
  LstmDirection<Real> fw;
  LstmDirection<Real> bw;
  AffineLayer<Real> proj;  // [d x 2h]: maps the concatenated directions to d
};

namespace detail {

// One direction over the sequence; returns the m per-step hidden rows [1 x h].
template <typename Real>
std::vector<Tensor<Real>> lstm_direction(const LstmDirection<Real>& p, const Tensor<Real>& seq,
                                         bool reverse) {
  const std::size_t m = seq.rows();
  const std::size_t h = p.bi.shape()[0];
  Tensor<Real> state_h = Tensor<Real>::zeros({1, h});
  Tensor<Real> state_c = Tensor<Real>::zeros({1, h});
  std::vector<Tensor<Real>> out(m);
  for (std::size_t step = 0; step < m; ++step) {
    const std::size_t t = reverse ? m - 1 - step : step;
    Tensor<Real> x_t = slice(seq, 0, t, 1);
    Tensor<Real> gi = sigmoid(add(linear(x_t, p.wi, p.bi), linear(state_h, p.ui)));
    Tensor<Real> gf = sigmoid(add(linear(x_t, p.wf, p.bf), linear(state_h, p.uf)));
    Tensor<Real> go = sigmoid(add(linear(x_t, p.wo, p.bo), linear(state_h, p.uo)));
    Tensor<Real> gg = tanh_act(add(linear(x_t, p.wg, p.bg), linear(state_h, p.ug)));
    state_c = add(mul(gf, state_c), mul(gi, gg));
    state_h = mul(go, tanh_act(state_c));
    out[t] = state_h;
  }
  return out;
}

}  // namespace detail

template <typename Real>
Tensor<Real> birecurrent_forward(const BiRecurrentEncoder<Real>& enc, const Tensor<Real>& seq) {
  detail::require_rank2(seq, "birecurrent_forward");
  const std::size_t m = seq.rows();
  auto fw = detail::lstm_direction(enc.fw, seq, /*reverse=*/false);
  auto bw = detail::lstm_direction(enc.bw, seq, /*reverse=*/true);
  std::vector<Tensor<Real>> rows(m);
  for (std::size_t t = 0; t < m; ++t) rows[t] = concat<Real>({fw[t], bw[t]}, 1);
  Tensor<Real> both = m == 1 ? rows[0] : concat(rows, 0);  // [m x 2h]
  return affine_forward(enc.proj, both);
}

// ---------------------------------------------------------------------------
// multi-head graph attention

template <typename Real>
struct GatHead {
  Tensor<Real> W;  // [(d/K) x d]
  Tensor<Real> a;  // [2(d/K)]
};

template <typename Real>
struct MultiHeadGraphAttentionLayer {
  std::vector<GatHead<Real>> heads;  // K heads; outputs concatenate back to d
};

// Post-softmax attention weights captured during a forward, for inspection.
template <typename Real>
struct AttnRecord {
  std::size_t layer = 0;
  std::size_t head = 0;
  std::size_t num_nodes = 0;
  std::vector<std::size_t> dst;  // segment id (destination node) per edge
  std::vector<Real> omega;       // normalized weight per edge
};

template <typename Real>
struct GatForwardOptions {
  bool training = false;
  double dropout = 0.0;  // applied to attention weights and layer outputs
  Rng* rng = nullptr;    // required when training with dropout > 0
  std::vector<AttnRecord<Real>>* probe = nullptr;
  std::size_t layer_index = 0;  // stamped onto probe records
  // Collects every pre-LeakyReLU attention score; finite-difference checks
  // use this to verify the evaluation point is clear of activation kinks.
  std::vector<Real>* kink_probe = nullptr;
};

template <typename Real>
Tensor<Real> gat_layer_forward(const MultiHeadGraphAttentionLayer<Real>& layer,
                               const Tensor<Real>& x, const PairGraph& graph,
                               GatForwardOptions<Real> opts = {}) {
  detail::require_rank2(x, "gat_layer_forward");
  const std::size_t n = graph.num_nodes();
  if (x.rows() != n) {
    throw std::invalid_argument("gat_layer_forward: " + std::to_string(x.rows()) +
                                " feature rows for " + std::to_string(n) + " graph nodes");
  }
  if (layer.heads.empty()) throw std::invalid_argument("gat_layer_forward: layer has no heads");

  std::vector<std::size_t> src(graph.edges.size()), dst(graph.edges.size());
  for (std::size_t e = 0; e < graph.edges.size(); ++e) {
    src[e] = graph.edges[e].src;
    dst[e] = graph.edges[e].dst;
  }
  {
    std::vector<char> has_in(n, 0);
    for (std::size_t id : dst) has_in[id] = 1;
    for (std::size_t i = 0; i < n; ++i) {
      if (!has_in[i]) {
        throw std::runtime_error("gat_layer_forward: node " + std::to_string(i) +
                                 " has no neighbors (attention softmax undefined)");
      }
    }
  }

  const bool drop = opts.training && opts.dropout > 0.0;
  if (drop && opts.rng == nullptr) {
    throw std::invalid_argument("gat_layer_forward: dropout requires an rng");
  }

  std::vector<Tensor<Real>> head_outs;
  head_outs.reserve(layer.heads.size());
  for (std::size_t k = 0; k < layer.heads.size(); ++k) {
    const auto& head = layer.heads[k];
    Tensor<Real> wx = linear(x, head.W);                       // [n x dk]
    Tensor<Real> wx_src = gather_rows(wx, src);                // [E x dk]
    Tensor<Real> wx_dst = gather_rows(wx, dst);                // [E x dk]
    // e_ij = LeakyReLU(a · [W x_i ‖ W x_j]) with i = destination, j = source.
    Tensor<Real> cat = concat<Real>({wx_dst, wx_src}, 1);      // [E x 2dk]
    Tensor<Real> pre = matmul(cat, head.a);
    if (opts.kink_probe != nullptr) {
      opts.kink_probe->insert(opts.kink_probe->end(), pre.values().begin(), pre.values().end());
    }
    Tensor<Real> scores = leaky_relu(pre, Real(kAttnLeakySlope));
    Tensor<Real> omega = segment_softmax(scores, dst, n);      // softmax over N(u_i)
    if (opts.probe != nullptr) {
      AttnRecord<Real> rec;
      rec.layer = opts.layer_index;
      rec.head = k;
      rec.num_nodes = n;
      rec.dst = dst;
      rec.omega.assign(omega.values().begin(), omega.values().end());
      opts.probe->push_back(std::move(rec));
    }
    if (drop) omega = dropout(omega, Real(opts.dropout), true, *opts.rng);
    head_outs.push_back(segment_weighted_sum(wx_src, omega, dst, n));
  }
  Tensor<Real> out = head_outs.size() == 1 ? head_outs[0] : concat(head_outs, 1);
  if (drop) out = dropout(out, Real(opts.dropout), true, *opts.rng);
  return out;
}

// ---------------------------------------------------------------------------
// GAT stacks

template <typename Real>
struct ImprovedGATStack {
  std::vector<MultiHeadGraphAttentionLayer<Real>> layers;  // L layers, width d
  AffineLayer<Real> w_im;  // [(L+1)d -> d] projection over the layer concat
};

// X^(l) = X^(l-1) + MultiGAT(X^(l-1)); H = W_im [X^(0) ‖ … ‖ X^(L)].
template <typename Real>
Tensor<Real> improved_gat_forward(const ImprovedGATStack<Real>& stack, const Tensor<Real>& x0,
                                  const PairGraph& graph, GatForwardOptions<Real> opts = {}) {
  std::vector<Tensor<Real>> levels{x0};
  Tensor<Real> x = x0;
  for (std::size_t l = 0; l < stack.layers.size(); ++l) {
    opts.layer_index = l;
    x = add(x, gat_layer_forward(stack.layers[l], x, graph, opts));
    levels.push_back(x);
  }
  Tensor<Real> cat = levels.size() == 1 ? levels[0] : concat(levels, 1);
  return affine_forward(stack.w_im, cat);
}

// The ablation baseline: plain composition, last layer's activation only.
// W_im and the residual adds are unused.
template <typename Real>
Tensor<Real> vanilla_gat_forward(const ImprovedGATStack<Real>& stack, const Tensor<Real>& x0,
                                 const PairGraph& graph, GatForwardOptions<Real> opts = {}) {
  Tensor<Real> x = x0;
  for (std::size_t l = 0; l < stack.layers.size(); ++l) {
    opts.layer_index = l;
    x = gat_layer_forward(stack.layers[l], x, graph, opts);
  }
  return x;
}

// ---------------------------------------------------------------------------
// initialization

// Weights: uniform in ±1/sqrt(fan_in). Embedding rows: N(0, 0.02^2).
// Biases: zero. Each tensor draws from its own name-derived stream so the
// result is independent of construction order.
template <typename Real>
void init_uniform_fan_in(Tensor<Real>& t, Rng& rng, std::size_t fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (std::size_t i = 0; i < t.size(); ++i) t.at(i) = Real(rng.uniform(-bound, bound));
}

template <typename Real>
void init_normal(Tensor<Real>& t, Rng& rng, double stddev) {
  for (std::size_t i = 0; i < t.size(); ++i) t.at(i) = Real(rng.normal(0.0, stddev));
}

}  // namespace graphmft
