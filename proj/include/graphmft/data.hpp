#pragma once

// Dataset representation, `graphmft-v1` file ingestion, the deterministic
// synthetic conversation generator, and conversation-level splitting.
//
// File format: UTF-8 text, LF line endings. Line 1 is the header object
//   {"schema_tag":"graphmft-v1","v_dim":..,"a_dim":..,"t_dim":..,
//    "num_classes":..,"num_speakers":..}
// and every following line is one conversation object
//   {"id":..,"speakers":[..],"labels":[..],"v":[[..]..],"a":[..],"t":[..]}
// where v/a/t hold m feature vectors of the header's dimensions.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "graphmft/graph.hpp"
#include "graphmft/util.hpp"

namespace graphmft {

inline constexpr const char* kSchemaTag = "graphmft-v1";

struct DatasetHeader {
  std::string schema_tag = kSchemaTag;
  std::size_t v_dim = 0;
  std::size_t a_dim = 0;
  std::size_t t_dim = 0;
  std::size_t num_classes = 0;
  std::size_t num_speakers = 0;

  std::size_t dim(Modality m) const {
    switch (m) {
      case Modality::V: return v_dim;
      case Modality::A: return a_dim;
      case Modality::T: return t_dim;
    }
    throw std::logic_error("DatasetHeader::dim: bad enum");
  }

  void validate() const {
    if (schema_tag != kSchemaTag) {
      throw std::invalid_argument("header: schema_tag '" + schema_tag + "' is not '" +
                                  kSchemaTag + "'");
    }
    if (v_dim < 1 || a_dim < 1 || t_dim < 1) throw std::invalid_argument("header: dims must be >= 1");
    if (num_classes < 1) throw std::invalid_argument("header: num_classes must be >= 1");
    if (num_speakers < 1) throw std::invalid_argument("header: num_speakers must be >= 1");
  }

  friend bool operator==(const DatasetHeader&, const DatasetHeader&) = default;
};

struct Conversation {
  std::string id;
  std::vector<std::size_t> speakers;
  std::vector<std::size_t> labels;
  std::vector<std::vector<double>> v;
  std::vector<std::vector<double>> a;
  std::vector<std::vector<double>> t;

  std::size_t length() const { return labels.size(); }

  const std::vector<std::vector<double>>& feats(Modality m) const {
    switch (m) {
      case Modality::V: return v;
      case Modality::A: return a;
      case Modality::T: return t;
    }
    throw std::logic_error("Conversation::feats: bad enum");
  }

  friend bool operator==(const Conversation&, const Conversation&) = default;
};

enum class Split { Train, Valid, Test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Valid: return "valid";
    case Split::Test: return "test";
  }
  throw std::logic_error("split_name: bad enum");
}

struct Dataset {
  DatasetHeader header;
  std::vector<Conversation> conversations;
  Split split = Split::Train;

  std::size_t num_utterances() const {
    std::size_t n = 0;
    for (const auto& c : conversations) n += c.length();
    return n;
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

// ---------------------------------------------------------------------------
// validation

namespace detail {

inline void validate_conversation(const Conversation& c, const DatasetHeader& h,
                                  const std::string& where) {
  const std::size_t m = c.labels.size();
  if (m == 0) throw std::invalid_argument(where + ": conversation is empty");
  auto check_len = [&](std::size_t got, const char* field) {
    if (got != m) {
      throw std::invalid_argument(where + ": field '" + field + "' has length " +
                                  std::to_string(got) + ", expected " + std::to_string(m));
    }
  };
  check_len(c.speakers.size(), "speakers");
  check_len(c.v.size(), "v");
  check_len(c.a.size(), "a");
  check_len(c.t.size(), "t");
  for (std::size_t i = 0; i < m; ++i) {
    if (c.speakers[i] >= h.num_speakers) {
      throw std::invalid_argument(where + ": field 'speakers' entry " + std::to_string(i) +
                                  " = " + std::to_string(c.speakers[i]) + " out of range (" +
                                  std::to_string(h.num_speakers) + " speakers)");
    }
    if (c.labels[i] >= h.num_classes) {
      throw std::invalid_argument(where + ": field 'labels' entry " + std::to_string(i) + " = " +
                                  std::to_string(c.labels[i]) + " out of range (" +
                                  std::to_string(h.num_classes) + " classes)");
    }
  }
  auto check_dims = [&](const std::vector<std::vector<double>>& rows, std::size_t dim,
                        const char* field) {
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != dim) {
        throw std::invalid_argument(where + ": field '" + field + "' vector " +
                                    std::to_string(i) + " has dim " +
                                    std::to_string(rows[i].size()) + ", expected " +
                                    std::to_string(dim));
      }
    }
  };
  check_dims(c.v, h.v_dim, "v");
  check_dims(c.a, h.a_dim, "a");
  check_dims(c.t, h.t_dim, "t");
}

}  // namespace detail

inline void validate_dataset(const Dataset& d) {
  d.header.validate();
  for (std::size_t i = 0; i < d.conversations.size(); ++i) {
    detail::validate_conversation(d.conversations[i], d.header,
                                  "conversation " + std::to_string(i));
  }
}

// ---------------------------------------------------------------------------
// save / load

inline nlohmann::ordered_json dataset_header_to_json(const DatasetHeader& h) {
  return nlohmann::ordered_json{{"schema_tag", h.schema_tag}, {"v_dim", h.v_dim},
                                {"a_dim", h.a_dim},           {"t_dim", h.t_dim},
                                {"num_classes", h.num_classes}, {"num_speakers", h.num_speakers}};
}

inline std::string dataset_to_string(const Dataset& d) {
  std::string out = dataset_header_to_json(d.header).dump();
  out += '\n';
  for (const auto& c : d.conversations) {
    nlohmann::ordered_json line{{"id", c.id},       {"speakers", c.speakers},
                                {"labels", c.labels}, {"v", c.v},
                                {"a", c.a},          {"t", c.t}};
    out += line.dump();
    out += '\n';
  }
  return out;
}

inline void save_dataset(const Dataset& d, const std::string& path) {
  atomic_write_file(path, dataset_to_string(d));
}

namespace detail {

template <typename T>
T json_field(const nlohmann::json& obj, const char* field, const std::string& where) {
  auto it = obj.find(field);
  if (it == obj.end()) {
    throw std::invalid_argument(where + ": missing field '" + field + "'");
  }
  try {
    return it->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw std::invalid_argument(where + ": field '" + field + "' has the wrong type");
  }
}

}  // namespace detail

inline Dataset load_dataset(std::istream& in, const std::string& source = "<stream>") {
  Dataset d;
  std::string line;
  std::size_t line_no = 0;

  if (!std::getline(in, line)) {
    throw std::invalid_argument(source + ": empty file (no header line)");
  }
  ++line_no;
  {
    const std::string where = source + ":" + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument(where + ": header is not valid JSON: " + e.what());
    }
    d.header.schema_tag = detail::json_field<std::string>(j, "schema_tag", where);
    d.header.v_dim = detail::json_field<std::size_t>(j, "v_dim", where);
    d.header.a_dim = detail::json_field<std::size_t>(j, "a_dim", where);
    d.header.t_dim = detail::json_field<std::size_t>(j, "t_dim", where);
    d.header.num_classes = detail::json_field<std::size_t>(j, "num_classes", where);
    d.header.num_speakers = detail::json_field<std::size_t>(j, "num_speakers", where);
    try {
      d.header.validate();
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(where + ": " + e.what());
    }
  }

  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument(where + ": conversation is not valid JSON: " + e.what());
    }
    Conversation c;
    c.id = detail::json_field<std::string>(j, "id", where);
    c.speakers = detail::json_field<std::vector<std::size_t>>(j, "speakers", where);
    c.labels = detail::json_field<std::vector<std::size_t>>(j, "labels", where);
    c.v = detail::json_field<std::vector<std::vector<double>>>(j, "v", where);
    c.a = detail::json_field<std::vector<std::vector<double>>>(j, "a", where);
    c.t = detail::json_field<std::vector<std::vector<double>>>(j, "t", where);
    try {
      detail::validate_conversation(c, d.header, where);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(std::string(e.what()));
    }
    d.conversations.push_back(std::move(c));
  }
  return d;
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset '" + path + "'");
  return load_dataset(in, path);
}

// ---------------------------------------------------------------------------
// synthetic generator

struct SynthConfig {
  std::size_t n_conv = 24;
  std::size_t m_min = 6;
  std::size_t m_max = 12;
  std::size_t num_speakers = 4;
  std::size_t num_classes = 4;
  std::size_t v_dim = 12;
  std::size_t a_dim = 12;
  std::size_t t_dim = 12;
  double noise_sigma = 0.4;
  double transition_stickiness = 0.55;
  double snr_v = 1.0;
  double snr_a = 1.0;
  double snr_t = 1.0;
  // Per-speaker feature offsets: scaled to this norm; `speaker_align` in [0,1]
  // mixes the offset direction from purely random (0) toward the prototype of
  // the speaker's preferred class (1), which makes speaker identity matter.
  double speaker_offset_norm = 0.25;
  double speaker_align = 0.0;
  std::uint64_t seed = 1;

  void validate() const {
    if (n_conv < 1) throw std::invalid_argument("gen-synth: n_conv must be >= 1");
    if (m_min < 1 || m_max < m_min) {
      throw std::invalid_argument("gen-synth: need 1 <= m_min <= m_max");
    }
    if (num_classes < 2) throw std::invalid_argument("gen-synth: num_classes must be >= 2");
    if (num_speakers < 1) throw std::invalid_argument("gen-synth: num_speakers must be >= 1");
    const std::size_t min_dim = std::min({v_dim, a_dim, t_dim});
    if (min_dim < num_classes) {
      throw std::invalid_argument("gen-synth: every modality dim must be >= num_classes");
    }
    if (noise_sigma < 0) throw std::invalid_argument("gen-synth: noise_sigma must be >= 0");
    if (transition_stickiness < 0 || transition_stickiness > 1) {
      throw std::invalid_argument("gen-synth: transition_stickiness must be in [0,1]");
    }
    if (snr_v < 0 || snr_a < 0 || snr_t < 0) {
      throw std::invalid_argument("gen-synth: snr scales must be >= 0");
    }
    if (speaker_offset_norm < 0) {
      throw std::invalid_argument("gen-synth: speaker_offset_norm must be >= 0");
    }
    if (speaker_align < 0 || speaker_align > 1) {
      throw std::invalid_argument("gen-synth: speaker_align must be in [0,1]");
    }
  }
};

namespace detail {

// prototype(c) is the c-th standard basis vector (already unit norm).
inline std::vector<double> class_prototype(std::size_t label, std::size_t dim) {
  std::vector<double> p(dim, 0.0);
  p[label] = 1.0;
  return p;
}

inline void scale_to_norm(std::vector<double>& x, double target) {
  double n2 = 0.0;
  for (double v : x) n2 += v * v;
  const double n = std::sqrt(n2);
  if (n == 0.0) return;
  for (double& v : x) v *= target / n;
}

// Fixed per-(speaker, modality) offset vectors, drawn once from a stream
// independent of conversation sampling.
inline std::vector<std::vector<double>> make_speaker_offsets(const SynthConfig& cfg,
                                                             std::size_t dim, Modality mod) {
  Rng rng(derive_seed(cfg.seed, std::string("synth/speaker_offsets/") + modality_char(mod)));
  std::vector<std::vector<double>> offsets(cfg.num_speakers);
  for (std::size_t s = 0; s < cfg.num_speakers; ++s) {
    std::vector<double> g(dim);
    for (auto& v : g) v = rng.normal();
    scale_to_norm(g, 1.0);
    const auto proto = class_prototype(s % cfg.num_classes, dim);
    std::vector<double> o(dim);
    for (std::size_t j = 0; j < dim; ++j) {
      o[j] = (1.0 - cfg.speaker_align) * g[j] + cfg.speaker_align * proto[j];
    }
    scale_to_norm(o, cfg.speaker_offset_norm);
    offsets[s] = std::move(o);
  }
  return offsets;
}

}  // namespace detail

inline Dataset gen_synthetic(const SynthConfig& cfg) {
  cfg.validate();

  Dataset d;
  d.header.v_dim = cfg.v_dim;
  d.header.a_dim = cfg.a_dim;
  d.header.t_dim = cfg.t_dim;
  d.header.num_classes = cfg.num_classes;
  d.header.num_speakers = cfg.num_speakers;

  const std::array<Modality, 3> mods{Modality::V, Modality::A, Modality::T};
  const std::array<double, 3> snr{cfg.snr_v, cfg.snr_a, cfg.snr_t};
  const std::array<std::size_t, 3> dims{cfg.v_dim, cfg.a_dim, cfg.t_dim};
  std::array<std::vector<std::vector<double>>, 3> offsets;
  for (std::size_t k = 0; k < 3; ++k) {
    offsets[k] = detail::make_speaker_offsets(cfg, dims[k], mods[k]);
  }

  Rng chain(derive_seed(cfg.seed, "synth/chain"));
  Rng noise(derive_seed(cfg.seed, "synth/noise"));

  d.conversations.reserve(cfg.n_conv);
  for (std::size_t ci = 0; ci < cfg.n_conv; ++ci) {
    Conversation c;
    c.id = "synth-" + std::to_string(ci);
    const std::size_t m =
        static_cast<std::size_t>(chain.uniform_int(static_cast<std::int64_t>(cfg.m_min),
                                                   static_cast<std::int64_t>(cfg.m_max)));
    c.speakers.resize(m);
    c.labels.resize(m);
    for (std::size_t i = 0; i < m; ++i) {
      c.speakers[i] = static_cast<std::size_t>(
          chain.uniform_int(0, static_cast<std::int64_t>(cfg.num_speakers) - 1));
      if (i == 0) {
        c.labels[i] = static_cast<std::size_t>(
            chain.uniform_int(0, static_cast<std::int64_t>(cfg.num_classes) - 1));
      } else if (chain.bernoulli(cfg.transition_stickiness)) {
        c.labels[i] = c.labels[i - 1];
      } else {
        // Uniform over the other classes.
        const auto step = static_cast<std::size_t>(
            chain.uniform_int(1, static_cast<std::int64_t>(cfg.num_classes) - 1));
        c.labels[i] = (c.labels[i - 1] + step) % cfg.num_classes;
      }
    }

    std::array<std::vector<std::vector<double>>*, 3> feats{&c.v, &c.a, &c.t};
    for (std::size_t k = 0; k < 3; ++k) {
      feats[k]->resize(m);
      for (std::size_t i = 0; i < m; ++i) {
        std::vector<double> x = detail::class_prototype(c.labels[i], dims[k]);
        for (double& v : x) v *= snr[k];
        const auto& off = offsets[k][c.speakers[i]];
        for (std::size_t j = 0; j < dims[k]; ++j) {
          x[j] += off[j] + cfg.noise_sigma * noise.normal();
        }
        (*feats[k])[i] = std::move(x);
      }
    }
    d.conversations.push_back(std::move(c));
  }
  return d;
}

// ---------------------------------------------------------------------------
// splitting

struct SplitRatios {
  double train = 0.8;
  double valid = 0.1;
  double test = 0.1;

  void validate() const {
    if (train <= 0 || valid <= 0 || test <= 0) {
      throw std::invalid_argument("split: ratios must be positive");
    }
    if (std::abs(train + valid + test - 1.0) > 1e-9) {
      throw std::invalid_argument("split: ratios must sum to 1");
    }
  }
};

struct DatasetSplits {
  Dataset train;
  Dataset valid;
  Dataset test;
};

inline DatasetSplits split_dataset(const Dataset& d, SplitRatios ratios, std::uint64_t seed) {
  ratios.validate();
  const std::size_t n = d.conversations.size();

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, "split/shuffle"));
  std::shuffle(order.begin(), order.end(), rng.engine());

  std::size_t n_train = static_cast<std::size_t>(std::llround(ratios.train * static_cast<double>(n)));
  std::size_t n_valid = static_cast<std::size_t>(std::llround(ratios.valid * static_cast<double>(n)));
  n_train = std::min(n_train, n);
  n_valid = std::min(n_valid, n - n_train);
  const std::size_t n_test = n - n_train - n_valid;
  if (n_train == 0 || n_valid == 0 || n_test == 0) {
    throw std::invalid_argument("split: a ratio rounds to zero conversations (" +
                                std::to_string(n_train) + "/" + std::to_string(n_valid) + "/" +
                                std::to_string(n_test) + " of " + std::to_string(n) + ")");
  }

  DatasetSplits out;
  out.train.header = out.valid.header = out.test.header = d.header;
  out.train.split = Split::Train;
  out.valid.split = Split::Valid;
  out.test.split = Split::Test;
  for (std::size_t i = 0; i < n; ++i) {
    const Conversation& c = d.conversations[order[i]];
    if (i < n_train) out.train.conversations.push_back(c);
    else if (i < n_train + n_valid) out.valid.conversations.push_back(c);
    else out.test.conversations.push_back(c);
  }
  return out;
}

}  // namespace graphmft
