#pragma once

#include <string>
#include <vector>

#include "ham/error.hpp"

namespace ham {

// counts[true][pred]
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes = 0) : classes_(classes), counts_(classes * classes, 0) {}

  static ConfusionMatrix from_rows(const std::vector<std::vector<std::size_t>>& rows) {
    ConfusionMatrix cm(rows.size());
    for (std::size_t t = 0; t < rows.size(); ++t) {
      if (rows[t].size() != rows.size()) throw ShapeError("confusion matrix must be square");
      for (std::size_t p = 0; p < rows.size(); ++p) cm.counts_[t * cm.classes_ + p] = rows[t][p];
    }
    return cm;
  }

  std::size_t classes() const noexcept { return classes_; }
  std::size_t operator()(std::size_t truth, std::size_t pred) const { return counts_.at(truth * classes_ + pred); }

  void add(std::size_t truth, std::size_t pred) {
    if (truth >= classes_ || pred >= classes_)
      throw ConfigError("class index out of range: (" + std::to_string(truth) + ", " + std::to_string(pred) +
                        ") for " + std::to_string(classes_) + " classes");
    ++counts_[truth * classes_ + pred];
  }

  std::size_t row_sum(std::size_t t) const {
    std::size_t s = 0;
    for (std::size_t p = 0; p < classes_; ++p) s += (*this)(t, p);
    return s;
  }
  std::size_t col_sum(std::size_t p) const {
    std::size_t s = 0;
    for (std::size_t t = 0; t < classes_; ++t) s += (*this)(t, p);
    return s;
  }
  std::size_t total() const {
    std::size_t s = 0;
    for (auto c : counts_) s += c;
    return s;
  }

  const std::vector<std::size_t>& counts() const noexcept { return counts_; }
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t classes_;
  std::vector<std::size_t> counts_;
};

inline ConfusionMatrix confusion(const std::vector<std::size_t>& preds, const std::vector<std::size_t>& labels,
                                 std::size_t classes) {
  if (preds.size() != labels.size()) throw ShapeError("confusion: predictions and labels differ in length");
  ConfusionMatrix cm(classes);
  for (std::size_t i = 0; i < preds.size(); ++i) cm.add(labels[i], preds[i]);
  return cm;
}

inline double balanced_accuracy(const ConfusionMatrix& cm) {
  if (cm.classes() == 0) throw ConfigError("balanced_accuracy: no classes");
  double acc = 0.0;
  for (std::size_t c = 0; c < cm.classes(); ++c) {
    const std::size_t n = cm.row_sum(c);
    if (n == 0) throw ProtocolError("balanced_accuracy: class " + std::to_string(c) + " has no samples");
    acc += static_cast<double>(cm(c, c)) / static_cast<double>(n);
  }
  return acc / static_cast<double>(cm.classes());
}

struct MetricsReport {
  double balanced_accuracy = 0.0;
  double sensitivity = 0.0;
  double specificity = 0.0;
  double precision = 0.0;
  std::vector<double> per_class_sensitivity;
  std::vector<double> per_class_specificity;
  std::vector<double> per_class_precision;
};

// One-vs-rest per class, 0/0 := 0, unweighted means over classes.
inline MetricsReport macro_metrics(const ConfusionMatrix& cm) {
  MetricsReport r;
  const std::size_t C = cm.classes();
  const std::size_t total = cm.total();
  auto ratio = [](std::size_t a, std::size_t b) { return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b); };
  for (std::size_t c = 0; c < C; ++c) {
    const std::size_t tp = cm(c, c);
    const std::size_t fn = cm.row_sum(c) - tp;
    const std::size_t fp = cm.col_sum(c) - tp;
    const std::size_t tn = total - tp - fn - fp;
    r.per_class_sensitivity.push_back(ratio(tp, tp + fn));
    r.per_class_specificity.push_back(ratio(tn, tn + fp));
    r.per_class_precision.push_back(ratio(tp, tp + fp));
  }
  auto mean = [&](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return C == 0 ? 0.0 : s / static_cast<double>(C);
  };
  r.sensitivity = mean(r.per_class_sensitivity);
  r.specificity = mean(r.per_class_specificity);
  r.precision = mean(r.per_class_precision);
  bool rows_ok = C > 0;
  for (std::size_t c = 0; c < C; ++c) rows_ok = rows_ok && cm.row_sum(c) > 0;
  r.balanced_accuracy = rows_ok ? balanced_accuracy(cm) : r.sensitivity;
  return r;
}

}  // namespace ham
