#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "prevmatch/nn.hpp"
#include "prevmatch/rng.hpp"
#include "prevmatch/tensor.hpp"

namespace prevmatch {

/// Immutable copy of the model at a past epoch, tagged with the validation
/// score that triggered the save. Parameters are deep-copied with
/// requires_grad=false: nothing that happens to the live model afterwards
/// can touch a stored snapshot.
struct Snapshot {
  SegModel model;
  int epoch = 0;
  double val_score = 0.0;
};

/// FNV-1a over the raw parameter bytes; used to verify snapshot
/// immutability across further training.
inline std::uint64_t parameter_checksum(const SegModel& model) {
  std::uint64_t h = 1469598103934665603ull;
  auto eat = [&h](const double* p, std::size_t n) {
    const unsigned char* bytes = reinterpret_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n * sizeof(double); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& p : model.parameters()) eat(p->data.data(), p->data.size());
  return h;
}

/// Bounded, ordered list of previous models, oldest first. Models are
/// saved on strict validation-score improvement (or on a fixed epoch
/// interval in the ablation comparator mode); once the list holds
/// capacity() snapshots, saving evicts the oldest.
class PrevRegistry {
 public:
  explicit PrevRegistry(int capacity) : capacity_(capacity) {
    if (capacity < 1) throw std::invalid_argument("PrevRegistry: capacity must be >= 1");
  }

  /// Rebuild a registry from persisted state (checkpoint resume). The
  /// snapshot list must already respect the capacity and epoch ordering.
  static PrevRegistry restore(int capacity, double best_score, std::vector<Snapshot> snapshots) {
    PrevRegistry reg(capacity);
    if (static_cast<int>(snapshots.size()) > capacity) {
      throw std::invalid_argument("PrevRegistry::restore: more snapshots than capacity");
    }
    for (std::size_t i = 1; i < snapshots.size(); ++i) {
      if (snapshots[i].epoch <= snapshots[i - 1].epoch) {
        throw std::invalid_argument("PrevRegistry::restore: snapshot epochs must increase");
      }
    }
    reg.snapshots_ = std::move(snapshots);
    reg.best_score_ = best_score;
    return reg;
  }

  int capacity() const { return capacity_; }
  int size() const { return static_cast<int>(snapshots_.size()); }
  bool empty() const { return snapshots_.empty(); }
  double best_score_so_far() const { return best_score_; }
  const std::vector<Snapshot>& snapshots() const { return snapshots_; }
  const Snapshot& at(int i) const { return snapshots_.at(static_cast<std::size_t>(i)); }

  /// Save iff val_score strictly exceeds the best seen so far.
  /// Ties do not save. Returns whether a snapshot was stored.
  bool maybe_save(const SegModel& model, int epoch, double val_score) {
    check_epoch(epoch);
    if (!(val_score > best_score_)) return false;
    best_score_ = val_score;
    push(model, epoch, val_score);
    return true;
  }

  /// Comparator save mode: store whenever epoch is a multiple of
  /// `interval`, with the same eviction rule. val_score is recorded but
  /// plays no role in the decision.
  bool save_on_interval(const SegModel& model, int epoch, int interval, double val_score) {
    if (interval < 1) throw std::invalid_argument("save_on_interval: interval must be >= 1");
    check_epoch(epoch);
    if (epoch % interval != 0) return false;
    push(model, epoch, val_score);
    return true;
  }

 private:
  void check_epoch(int epoch) const {
    if (!snapshots_.empty() && epoch <= snapshots_.back().epoch) {
      throw std::invalid_argument("registry: epoch " + std::to_string(epoch) +
                                  " not greater than last stored epoch " +
                                  std::to_string(snapshots_.back().epoch));
    }
  }

  void push(const SegModel& model, int epoch, double val_score) {
    if (static_cast<int>(snapshots_.size()) == capacity_) {
      snapshots_.erase(snapshots_.begin());  // oldest first
    }
    snapshots_.push_back(Snapshot{model.clone_detached(), epoch, val_score});
  }

  int capacity_;
  double best_score_ = -std::numeric_limits<double>::infinity();
  std::vector<Snapshot> snapshots_;
};

// ---------------------------------------------------------------------------
// randomized ensemble

/// k ~ U{1..min(K, available)}. With fewer than K snapshots stored the
/// draw shrinks to what is available rather than skipping guidance.
inline int sample_k(CounterRng& rng, int upper_k, int available) {
  if (upper_k < 1) throw std::invalid_argument("sample_k: K must be >= 1");
  if (available < 1) throw std::invalid_argument("sample_k: no snapshots available");
  const int hi = std::min(upper_k, available);
  return 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(hi)));
}

/// Dirichlet(alpha) via normalized Gamma draws. k=1 returns exactly {1.0}.
inline std::vector<double> sample_weights(CounterRng& rng, int k,
                                          const std::vector<double>& alpha) {
  if (k < 1) throw std::invalid_argument("sample_weights: k must be >= 1");
  if (alpha.size() != static_cast<std::size_t>(k)) {
    throw std::invalid_argument("sample_weights: alpha must have k entries");
  }
  for (double a : alpha) {
    if (!(a > 0.0)) throw std::invalid_argument("sample_weights: alpha entries must be positive");
  }
  if (k == 1) return {1.0};
  std::vector<double> w(static_cast<std::size_t>(k));
  double total = 0.0;
  for (int i = 0; i < k; ++i) {
    w[static_cast<std::size_t>(i)] = rng.gamma(alpha[static_cast<std::size_t>(i)]);
    total += w[static_cast<std::size_t>(i)];
  }
  for (auto& v : w) v /= total;
  return w;
}

/// Previous guidance for one weak-view batch: the convex combination of
/// the selected teachers' probability outputs, its argmax pseudo-labels,
/// and the tau_prev confidence mask.
struct GuidanceBatch {
  TensorPtr probs;        // [B,C,H,W]
  LabelMap pseudo_labels; // [B,H,W]
  BoolMap mask;           // [B,H,W], max prob >= tau_prev
  std::vector<double> confidence;  // winning prob per pixel
  int k_used = 0;
  std::vector<double> weights_used;
  std::vector<int> snapshot_indices;
};

/// Weighted ensemble of teacher predictions on x^w. Teachers are
/// constants: their forwards record no graph, so no gradient can flow
/// into a snapshot. Probabilities are combined in probability space
/// (softmax first), which keeps the result a distribution and inside the
/// per-class min/max envelope of the teachers. The weighted sum
/// accumulates in snapshot-list order.
inline GuidanceBatch ensemble_predict(const std::vector<const Snapshot*>& snapshots,
                                      const TensorPtr& weak_batch,
                                      const std::vector<double>& weights, double tau_prev) {
  if (snapshots.empty()) throw std::invalid_argument("ensemble_predict: need at least one snapshot");
  if (snapshots.size() != weights.size()) {
    throw std::invalid_argument("ensemble_predict: got " + std::to_string(snapshots.size()) +
                                " snapshots but " + std::to_string(weights.size()) + " weights");
  }
  NoGradGuard no_grad;
  TensorPtr combined;
  for (std::size_t i = 0; i < snapshots.size(); ++i) {
    TensorPtr p = softmax_channels(snapshots[i]->model.forward(weak_batch));
    if (i == 0 && snapshots.size() == 1 && weights[0] == 1.0) {
      combined = p;  // k=1 keeps the teacher's output bit-exactly
      break;
    }
    if (!combined) {
      combined = scale(p, weights[i]);
    } else {
      if (p->shape != combined->shape) {
        throw std::invalid_argument("ensemble_predict: snapshot " + std::to_string(i) +
                                    " output shape " + shape_str(p->shape) +
                                    " differs from " + shape_str(combined->shape));
      }
      for (std::size_t j = 0; j < combined->numel(); ++j)
        combined->data[j] += weights[i] * p->data[j];
    }
  }

  GuidanceBatch g;
  g.probs = combined;
  auto [labels, conf] = argmax_channels(combined);
  g.pseudo_labels = std::move(labels);
  g.mask = threshold_mask(conf, g.pseudo_labels.shape, tau_prev);
  g.confidence = std::move(conf);
  g.k_used = static_cast<int>(snapshots.size());
  g.weights_used = weights;
  return g;
}

/// Draw (k, distinct snapshot indices, weights) per the configured
/// randomization: random selection draws k ~ U{1..min(K, size)}, otherwise
/// k is fixed at min(K, size); random weights draws Dirichlet(alpha),
/// otherwise weights are uniform 1/k.
struct EnsembleDraw {
  std::vector<int> indices;
  std::vector<double> weights;
};

inline EnsembleDraw draw_ensemble(CounterRng& rng, const PrevRegistry& registry, int upper_k,
                                  double alpha, bool random_selection, bool random_weights) {
  if (registry.empty()) throw std::invalid_argument("draw_ensemble: registry is empty");
  const int avail = registry.size();
  const int k = random_selection ? sample_k(rng, upper_k, avail) : std::min(upper_k, avail);
  EnsembleDraw d;
  d.indices = rng.sample_distinct(k, avail);
  if (random_weights) {
    d.weights = sample_weights(rng, k, std::vector<double>(static_cast<std::size_t>(k), alpha));
  } else {
    d.weights.assign(static_cast<std::size_t>(k), 1.0 / k);
  }
  return d;
}

}  // namespace prevmatch
