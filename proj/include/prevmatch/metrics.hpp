#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "prevmatch/data.hpp"
#include "prevmatch/nn.hpp"
#include "prevmatch/tensor.hpp"

namespace prevmatch {

inline double quiet_nan() { return std::numeric_limits<double>::quiet_NaN(); }

/// C x C pixel tally; rows are ground truth, columns are predictions.
struct ConfusionMatrix {
  int num_classes = 0;
  std::vector<std::uint64_t> counts;  // row-major C*C

  explicit ConfusionMatrix(int c) : num_classes(c), counts(static_cast<std::size_t>(c) * c, 0) {
    if (c < 1) throw std::invalid_argument("ConfusionMatrix: need at least one class");
  }

  std::uint64_t& at(int truth, int pred) {
    return counts[static_cast<std::size_t>(truth) * num_classes + pred];
  }
  std::uint64_t at(int truth, int pred) const {
    return counts[static_cast<std::size_t>(truth) * num_classes + pred];
  }
  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto v : counts) t += v;
    return t;
  }
  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    if (o.num_classes != num_classes) {
      throw std::invalid_argument("ConfusionMatrix: class count mismatch");
    }
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
    return *this;
  }
};

inline void accumulate(ConfusionMatrix& cm, const LabelMap& pred, const LabelMap& truth) {
  if (pred.shape != truth.shape) {
    throw std::invalid_argument("accumulate: prediction shape " + shape_str(pred.shape) +
                                " differs from truth shape " + shape_str(truth.shape));
  }
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const int p = pred.data[i];
    const int t = truth.data[i];
    if (p < 0 || p >= cm.num_classes || t < 0 || t >= cm.num_classes) {
      throw std::out_of_range("accumulate: label out of range [0," +
                              std::to_string(cm.num_classes) + ") at flat index " +
                              std::to_string(i) + " (pred=" + std::to_string(p) +
                              ", truth=" + std::to_string(t) + ")");
    }
    ++cm.at(t, p);
  }
}

struct IouResult {
  std::vector<double> per_class;  // NaN for classes absent from truth and prediction
  double miou = 0.0;
};

/// IoU_c = TP / (TP + FP + FN). Classes with an empty union (absent from
/// both truth and prediction) are excluded from the mean.
inline IouResult iou_scores(const ConfusionMatrix& cm) {
  IouResult r;
  r.per_class.assign(static_cast<std::size_t>(cm.num_classes), quiet_nan());
  double sum = 0.0;
  int included = 0;
  for (int c = 0; c < cm.num_classes; ++c) {
    const std::uint64_t tp = cm.at(c, c);
    std::uint64_t row = 0, col = 0;
    for (int j = 0; j < cm.num_classes; ++j) {
      row += cm.at(c, j);
      col += cm.at(j, c);
    }
    const std::uint64_t uni = row + col - tp;
    if (uni == 0) continue;
    const double iou = static_cast<double>(tp) / static_cast<double>(uni);
    r.per_class[static_cast<std::size_t>(c)] = iou;
    sum += iou;
    ++included;
  }
  if (included == 0) {
    throw std::invalid_argument("iou_scores: degenerate confusion matrix, every class absent");
  }
  r.miou = sum / included;
  return r;
}

/// Per-class pseudo-label accuracy over masked-in pixels: among masked-in
/// pixels whose ground truth is c, the fraction labeled c. Classes with no
/// masked-in truth pixels are absent (NaN).
inline std::vector<double> pseudo_accuracy(const LabelMap& pseudo, const BoolMap& mask,
                                           const LabelMap& truth, int num_classes) {
  if (pseudo.shape != truth.shape || mask.shape != truth.shape) {
    throw std::invalid_argument("pseudo_accuracy: pseudo/mask/truth shapes must match");
  }
  std::vector<std::uint64_t> seen(static_cast<std::size_t>(num_classes), 0);
  std::vector<std::uint64_t> correct(static_cast<std::size_t>(num_classes), 0);
  for (std::size_t i = 0; i < truth.numel(); ++i) {
    if (!mask.data[i]) continue;
    const int t = truth.data[i];
    if (t < 0 || t >= num_classes) {
      throw std::out_of_range("pseudo_accuracy: truth label " + std::to_string(t) +
                              " out of range at flat index " + std::to_string(i));
    }
    ++seen[static_cast<std::size_t>(t)];
    if (pseudo.data[i] == t) ++correct[static_cast<std::size_t>(t)];
  }
  std::vector<double> acc(static_cast<std::size_t>(num_classes), quiet_nan());
  for (int c = 0; c < num_classes; ++c) {
    if (seen[static_cast<std::size_t>(c)] > 0) {
      acc[static_cast<std::size_t>(c)] = static_cast<double>(correct[static_cast<std::size_t>(c)]) /
                                         static_cast<double>(seen[static_cast<std::size_t>(c)]);
    }
  }
  return acc;
}

// ---------------------------------------------------------------------------
// evaluation

/// Confusion matrix of the model over full (uncropped, unaugmented)
/// scenes. Scenes are processed in order; forwards record no graph.
inline ConfusionMatrix evaluate_model(const SegModel& model, const std::vector<Scene>& scenes,
                                      int batch = 8) {
  if (scenes.empty()) throw std::invalid_argument("evaluate_model: empty scene list");
  NoGradGuard no_grad;
  ConfusionMatrix cm(model.num_classes());
  const int ch = scenes[0].image->shape[0];
  const int h = scenes[0].image->shape[1];
  const int w = scenes[0].image->shape[2];
  const std::size_t scene_len = static_cast<std::size_t>(ch) * h * w;
  for (std::size_t start = 0; start < scenes.size(); start += static_cast<std::size_t>(batch)) {
    const std::size_t n = std::min(static_cast<std::size_t>(batch), scenes.size() - start);
    auto x = zeros({static_cast<int>(n), ch, h, w});
    for (std::size_t i = 0; i < n; ++i) {
      std::copy(scenes[start + i].image->data.begin(), scenes[start + i].image->data.end(),
                x->data.begin() + static_cast<std::ptrdiff_t>(i * scene_len));
    }
    auto probs = softmax_channels(model.forward(x));
    auto [pred, conf] = argmax_channels(probs);
    for (std::size_t i = 0; i < n; ++i) {
      LabelMap pred_i = LabelMap::filled({h, w}, 0);
      const std::size_t plane = static_cast<std::size_t>(h) * w;
      std::copy(pred.data.begin() + static_cast<std::ptrdiff_t>(i * plane),
                pred.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * plane),
                pred_i.data.begin());
      accumulate(cm, pred_i, scenes[start + i].labels);
    }
  }
  return cm;
}

/// Pseudo-label quality of the current model over (a prefix of) the
/// unlabeled pool, read against the hidden ground truth. Pseudo-labels
/// and the confidence mask are computed on the raw images.
inline std::vector<double> pseudo_accuracy_on_pool(const SegModel& model,
                                                   const std::vector<Scene>& pool, double tau,
                                                   int limit, int batch = 8) {
  if (pool.empty()) throw std::invalid_argument("pseudo_accuracy_on_pool: empty pool");
  NoGradGuard no_grad;
  const std::size_t n_eval = limit > 0 ? std::min(pool.size(), static_cast<std::size_t>(limit))
                                       : pool.size();
  const int c = model.num_classes();
  std::vector<std::uint64_t> seen(static_cast<std::size_t>(c), 0);
  std::vector<std::uint64_t> correct(static_cast<std::size_t>(c), 0);
  const int ch = pool[0].image->shape[0];
  const int h = pool[0].image->shape[1];
  const int w = pool[0].image->shape[2];
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (std::size_t start = 0; start < n_eval; start += static_cast<std::size_t>(batch)) {
    const std::size_t n = std::min(static_cast<std::size_t>(batch), n_eval - start);
    auto x = zeros({static_cast<int>(n), ch, h, w});
    for (std::size_t i = 0; i < n; ++i) {
      std::copy(pool[start + i].image->data.begin(), pool[start + i].image->data.end(),
                x->data.begin() + static_cast<std::ptrdiff_t>(i * plane * ch));
    }
    auto probs = softmax_channels(model.forward(x));
    auto [pred, conf] = argmax_channels(probs);
    for (std::size_t i = 0; i < n; ++i) {
      const Scene& sc = pool[start + i];
      for (std::size_t px = 0; px < plane; ++px) {
        const std::size_t j = i * plane + px;
        if (conf[j] < tau) continue;
        const int t = sc.labels.data[px];
        ++seen[static_cast<std::size_t>(t)];
        if (pred.data[j] == t) ++correct[static_cast<std::size_t>(t)];
      }
    }
  }
  std::vector<double> acc(static_cast<std::size_t>(c), quiet_nan());
  for (int k = 0; k < c; ++k) {
    if (seen[static_cast<std::size_t>(k)] > 0) {
      acc[static_cast<std::size_t>(k)] = static_cast<double>(correct[static_cast<std::size_t>(k)]) /
                                         static_cast<double>(seen[static_cast<std::size_t>(k)]);
    }
  }
  return acc;
}

// ---------------------------------------------------------------------------
// training history records

struct MetricsRecord {
  int epoch = 0;
  double l_s = 0.0;
  double l_u_standard = 0.0;
  double l_u_prev = 0.0;
  double lambda = 0.0;
  double miou_val = 0.0;
  std::vector<double> val_iou;     // per class, NaN = excluded
  std::vector<double> pseudo_acc;  // per class, NaN = absent
  double mask_frac_standard = 0.0;
  double mask_frac_prev = 0.0;
};

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

/// Population standard deviation.
inline double std_dev(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

inline double max_consecutive_drop(const std::vector<double>& v) {
  double drop = 0.0;
  for (std::size_t i = 1; i < v.size(); ++i) drop = std::max(drop, v[i - 1] - v[i]);
  return drop;
}

struct StabilityStats {
  std::vector<double> iou_std;       // per class over the tail window
  std::vector<double> iou_max_drop;  // per class over the tail window
  int tail_epochs = 0;
};

/// Late-training stability: per-class standard deviation of validation
/// IoU and the largest single-epoch decrease, both over the trailing
/// round(tail_frac * history) epochs. NaN epochs (class excluded) are
/// skipped.
inline StabilityStats stability_stats(const std::vector<MetricsRecord>& history,
                                      double tail_frac) {
  if (history.size() < 2) throw std::invalid_argument("stability_stats: need history length >= 2");
  if (!(tail_frac > 0.0) || tail_frac > 1.0) {
    throw std::invalid_argument("stability_stats: tail_frac must be in (0,1]");
  }
  const int len = static_cast<int>(history.size());
  const int tail = std::max(2, static_cast<int>(std::lround(tail_frac * len)));
  const int start = len - std::min(tail, len);
  const std::size_t c = history[0].val_iou.size();
  StabilityStats st;
  st.tail_epochs = len - start;
  st.iou_std.assign(c, 0.0);
  st.iou_max_drop.assign(c, 0.0);
  for (std::size_t cls = 0; cls < c; ++cls) {
    std::vector<double> series;
    for (int e = start; e < len; ++e) {
      const double v = history[static_cast<std::size_t>(e)].val_iou[cls];
      if (std::isfinite(v)) series.push_back(v);
    }
    st.iou_std[cls] = std_dev(series);
    st.iou_max_drop[cls] = max_consecutive_drop(series);
  }
  return st;
}

struct GeneralizationDelta {
  double miou_seen = 0.0;
  double miou_shifted = 0.0;
  double delta = 0.0;  // seen - shifted
};

inline GeneralizationDelta generalization_delta(const SegModel& model,
                                                const std::vector<Scene>& test,
                                                const std::vector<Scene>& shifted_test) {
  if (test.empty() || shifted_test.empty()) {
    throw std::invalid_argument("generalization_delta: both splits must be non-empty");
  }
  GeneralizationDelta g;
  g.miou_seen = iou_scores(evaluate_model(model, test)).miou;
  g.miou_shifted = iou_scores(evaluate_model(model, shifted_test)).miou;
  g.delta = g.miou_seen - g.miou_shifted;
  return g;
}

}  // namespace prevmatch
