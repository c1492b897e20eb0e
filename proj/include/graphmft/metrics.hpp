#pragma once

// Classification metrics: accuracy, per-class F1, support-weighted F1, and
// the confusion matrix, plus their JSON/CSV serializations.

#include <cstddef>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace graphmft {

struct Metrics {
  double accuracy = 0.0;
  std::vector<double> per_class_f1;
  double weighted_f1 = 0.0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted] counts

  friend bool operator==(const Metrics&, const Metrics&) = default;
};

inline Metrics compute_metrics(const std::vector<std::size_t>& y_true,
                               const std::vector<std::size_t>& y_pred,
                               std::size_t num_classes) {
  if (y_true.empty() || y_true.size() != y_pred.size()) {
    throw std::invalid_argument("metrics: need equal-length nonempty label vectors, got " +
                                std::to_string(y_true.size()) + " and " +
                                std::to_string(y_pred.size()));
  }
  Metrics m;
  m.confusion.assign(num_classes, std::vector<std::size_t>(num_classes, 0));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    if (y_true[i] >= num_classes || y_pred[i] >= num_classes) {
      throw std::invalid_argument("metrics: label out of range at index " + std::to_string(i));
    }
    m.confusion[y_true[i]][y_pred[i]] += 1;
    correct += y_true[i] == y_pred[i];
  }
  const double total = static_cast<double>(y_true.size());
  m.accuracy = static_cast<double>(correct) / total;

  m.per_class_f1.assign(num_classes, 0.0);
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::size_t tp = m.confusion[c][c];
    std::size_t support = 0, predicted = 0;
    for (std::size_t j = 0; j < num_classes; ++j) {
      support += m.confusion[c][j];
      predicted += m.confusion[j][c];
    }
    const double precision = predicted == 0 ? 0.0 : double(tp) / double(predicted);
    const double recall = support == 0 ? 0.0 : double(tp) / double(support);
    const double f1 =
        precision + recall == 0.0 ? 0.0 : 2.0 * precision * recall / (precision + recall);
    m.per_class_f1[c] = f1;
    m.weighted_f1 += (double(support) / total) * f1;
  }
  return m;
}

inline nlohmann::ordered_json metrics_to_json(const Metrics& m) {
  return nlohmann::ordered_json{{"accuracy", m.accuracy},
                                {"weighted_f1", m.weighted_f1},
                                {"per_class_f1", m.per_class_f1},
                                {"confusion", m.confusion}};
}

// Plain count rows, one line per true class.
inline std::string confusion_to_csv(const Metrics& m) {
  std::string out;
  for (const auto& row : m.confusion) {
    for (std::size_t j = 0; j < row.size(); ++j) {
      if (j) out += ',';
      out += std::to_string(row[j]);
    }
    out += '\n';
  }
  return out;
}

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

}  // namespace detail

}  // namespace graphmft
