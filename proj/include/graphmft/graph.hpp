#pragma once

// Pairwise modality graphs. Each conversation of m utterances yields three
// graphs (V-A, V-T, A-T); a graph has 2m nodes — one per utterance per
// modality — and directed edges of three kinds:
//   intra: same modality, within the context window (P past, F future)
//   inter: the two modality nodes of the same utterance, both directions
//   self:  optional self-loop on every node
// Construction depends only on (m, P, F, self_loops), never on features.

#include <array>
#include <cstddef>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "graphmft/util.hpp"

namespace graphmft {

enum class Modality { V, A, T };
enum class Pair { VA, VT, AT };
enum class EdgeKind { Intra, Inter, Self };

inline char modality_char(Modality m) {
  switch (m) {
    case Modality::V: return 'v';
    case Modality::A: return 'a';
    case Modality::T: return 't';
  }
  throw std::logic_error("modality_char: bad enum");
}

inline Modality modality_from_char(char c) {
  switch (c) {
    case 'v': return Modality::V;
    case 'a': return Modality::A;
    case 't': return Modality::T;
    default:
      throw std::invalid_argument(std::string("unknown modality '") + c + "'");
  }
}

inline std::array<Modality, 2> pair_modalities(Pair p) {
  switch (p) {
    case Pair::VA: return {Modality::V, Modality::A};
    case Pair::VT: return {Modality::V, Modality::T};
    case Pair::AT: return {Modality::A, Modality::T};
  }
  throw std::logic_error("pair_modalities: bad enum");
}

inline std::string pair_name(Pair p) {
  const auto mods = pair_modalities(p);
  return std::string{modality_char(mods[0]), modality_char(mods[1])};
}

inline Pair pair_from_name(const std::string& name) {
  if (name == "va") return Pair::VA;
  if (name == "vt") return Pair::VT;
  if (name == "at") return Pair::AT;
  throw std::invalid_argument("unknown modality pair '" + name + "' (expected va, vt, or at)");
}

inline const char* edge_kind_name(EdgeKind k) {
  switch (k) {
    case EdgeKind::Intra: return "intra";
    case EdgeKind::Inter: return "inter";
    case EdgeKind::Self: return "self";
  }
  throw std::logic_error("edge_kind_name: bad enum");
}

inline EdgeKind edge_kind_from_name(const std::string& s) {
  if (s == "intra") return EdgeKind::Intra;
  if (s == "inter") return EdgeKind::Inter;
  if (s == "self") return EdgeKind::Self;
  throw std::invalid_argument("unknown edge kind '" + s + "'");
}

struct GraphNode {
  std::size_t utterance_index = 0;  // 0-based position within the conversation
  Modality modality = Modality::V;

  friend bool operator==(const GraphNode&, const GraphNode&) = default;
};

struct GraphEdge {
  std::size_t src = 0;  // global node ids in [0, 2m)
  std::size_t dst = 0;
  EdgeKind kind = EdgeKind::Intra;

  friend bool operator==(const GraphEdge&, const GraphEdge&) = default;
};

struct PairGraph {
  Pair pair = Pair::VA;
  std::size_t m = 0;  // utterances per conversation
  std::vector<GraphNode> nodes;  // size 2m: first modality at [0,m), second at [m,2m)
  std::vector<GraphEdge> edges;  // canonical order: sorted by (src, dst)
  std::size_t window_p = 0;
  std::size_t window_f = 0;
  bool self_loops = false;

  std::size_t num_nodes() const { return nodes.size(); }

  friend bool operator==(const PairGraph&, const PairGraph&) = default;
};

// Node ids: utterance i of the pair's first modality is node i, of the second
// modality node m+i.
inline std::size_t graph_node_id(std::size_t m, std::size_t modality_slot, std::size_t utt) {
  return modality_slot * m + utt;
}

inline PairGraph build_pair_graph(std::size_t m, Pair pair, std::size_t p, std::size_t f,
                                  bool self_loops) {
  if (m == 0) throw std::invalid_argument("build_pair_graph: m must be >= 1");

  PairGraph g;
  g.pair = pair;
  g.m = m;
  g.window_p = p;
  g.window_f = f;
  g.self_loops = self_loops;

  const auto mods = pair_modalities(pair);
  g.nodes.reserve(2 * m);
  for (std::size_t slot = 0; slot < 2; ++slot)
    for (std::size_t i = 0; i < m; ++i) g.nodes.push_back({i, mods[slot]});

  for (std::size_t slot = 0; slot < 2; ++slot) {
    for (std::size_t i = 0; i < m; ++i) {
      const std::size_t src = graph_node_id(m, slot, i);
      // Past window: up to P utterances back, clipped at the start.
      const std::size_t back = std::min(p, i);
      for (std::size_t d = 1; d <= back; ++d)
        g.edges.push_back({src, graph_node_id(m, slot, i - d), EdgeKind::Intra});
      // Future window: up to F utterances ahead, clipped at the end.
      const std::size_t fwd = std::min(f, m - 1 - i);
      for (std::size_t d = 1; d <= fwd; ++d)
        g.edges.push_back({src, graph_node_id(m, slot, i + d), EdgeKind::Intra});
      // Same utterance in the other modality, this direction.
      g.edges.push_back({src, graph_node_id(m, 1 - slot, i), EdgeKind::Inter});
      if (self_loops) g.edges.push_back({src, src, EdgeKind::Self});
    }
  }

  std::sort(g.edges.begin(), g.edges.end(), [](const GraphEdge& a, const GraphEdge& b) {
    return std::tie(a.src, a.dst) < std::tie(b.src, b.dst);
  });
  return g;
}

inline std::array<PairGraph, 3> build_all_graphs(std::size_t m, std::size_t p, std::size_t f,
                                                 bool self_loops) {
  return {build_pair_graph(m, Pair::VA, p, f, self_loops),
          build_pair_graph(m, Pair::VT, p, f, self_loops),
          build_pair_graph(m, Pair::AT, p, f, self_loops)};
}

// Closed-form directed edge counts, used as the cheap cross-check against the
// materialized list.
inline std::size_t intra_edge_count(std::size_t m, std::size_t p, std::size_t f) {
  std::size_t total = 0;
  for (std::size_t i = 1; i <= m; ++i)
    total += std::min(p, i - 1) + std::min(f, m - i);
  return total;
}

inline std::size_t expected_edge_count(std::size_t m, std::size_t p, std::size_t f,
                                       bool self_loops) {
  return 2 * intra_edge_count(m, p, f) + 2 * m + (self_loops ? 2 * m : 0);
}

// ---------------------------------------------------------------------------
// text dump / parse

inline std::string dump_graph_string(const PairGraph& g) {
  std::ostringstream os;
  for (const auto& e : g.edges) {
    const auto& s = g.nodes[e.src];
    const auto& d = g.nodes[e.dst];
    os << modality_char(s.modality) << ' ' << s.utterance_index << ' '
       << modality_char(d.modality) << ' ' << d.utterance_index << ' ' << edge_kind_name(e.kind)
       << '\n';
  }
  return os.str();
}

inline void dump_graph(const PairGraph& g, const std::string& path) {
  atomic_write_file(path, dump_graph_string(g));
}

// Rebuild a PairGraph from an edge-list dump. Everything is inferred from the
// lines: the pair from which modality letters appear, m from the largest
// utterance index, self_loops from the presence of self edges, and the window
// from the largest backward/forward intra step. The windows of the source
// graph are recovered exactly whenever P,F <= m-1 (larger windows clip to the
// conversation and are indistinguishable from m-1).
inline PairGraph parse_graph(std::istream& in) {
  struct RawEdge {
    Modality src_mod, dst_mod;
    std::size_t src_utt, dst_utt;
    EdgeKind kind;
  };
  std::vector<RawEdge> raw;
  std::string line;
  std::size_t line_no = 0;
  std::size_t max_utt = 0;
  bool saw_v = false, saw_a = false, saw_t = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string sm, dm, kind;
    long long si = -1, di = -1;
    if (!(ls >> sm >> si >> dm >> di >> kind) || sm.size() != 1 || dm.size() != 1 || si < 0 ||
        di < 0) {
      throw std::invalid_argument("graph parse: malformed line " + std::to_string(line_no) +
                                  ": '" + line + "'");
    }
    RawEdge e{modality_from_char(sm[0]), modality_from_char(dm[0]),
              static_cast<std::size_t>(si), static_cast<std::size_t>(di),
              edge_kind_from_name(kind)};
    for (Modality mod : {e.src_mod, e.dst_mod}) {
      saw_v |= mod == Modality::V;
      saw_a |= mod == Modality::A;
      saw_t |= mod == Modality::T;
    }
    max_utt = std::max({max_utt, e.src_utt, e.dst_utt});
    raw.push_back(e);
  }
  if (raw.empty()) throw std::invalid_argument("graph parse: no edges");
  if (saw_v + saw_a + saw_t != 2) {
    throw std::invalid_argument("graph parse: expected exactly two modalities");
  }

  Pair pair = Pair::VA;
  if (saw_v && saw_a) pair = Pair::VA;
  else if (saw_v && saw_t) pair = Pair::VT;
  else pair = Pair::AT;

  const std::size_t m = max_utt + 1;
  const auto mods = pair_modalities(pair);
  auto slot_of = [&](Modality mod) -> std::size_t {
    if (mod == mods[0]) return 0;
    if (mod == mods[1]) return 1;
    throw std::invalid_argument("graph parse: modality outside inferred pair");
  };

  PairGraph g;
  g.pair = pair;
  g.m = m;
  g.nodes.reserve(2 * m);
  for (std::size_t slot = 0; slot < 2; ++slot)
    for (std::size_t i = 0; i < m; ++i) g.nodes.push_back({i, mods[slot]});

  for (const auto& e : raw) {
    const std::size_t src = graph_node_id(m, slot_of(e.src_mod), e.src_utt);
    const std::size_t dst = graph_node_id(m, slot_of(e.dst_mod), e.dst_utt);
    g.edges.push_back({src, dst, e.kind});
    if (e.kind == EdgeKind::Self) g.self_loops = true;
    if (e.kind == EdgeKind::Intra) {
      if (e.dst_utt < e.src_utt) g.window_p = std::max(g.window_p, e.src_utt - e.dst_utt);
      if (e.dst_utt > e.src_utt) g.window_f = std::max(g.window_f, e.dst_utt - e.src_utt);
    }
  }
  std::sort(g.edges.begin(), g.edges.end(), [](const GraphEdge& a, const GraphEdge& b) {
    return std::tie(a.src, a.dst) < std::tie(b.src, b.dst);
  });
  return g;
}

inline PairGraph parse_graph_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("graph parse: cannot open '" + path + "'");
  return parse_graph(in);
}

}  // namespace graphmft
