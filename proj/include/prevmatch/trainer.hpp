#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "prevmatch/data.hpp"
#include "prevmatch/metrics.hpp"
#include "prevmatch/nn.hpp"
#include "prevmatch/registry.hpp"
#include "prevmatch/rng.hpp"
#include "prevmatch/tensor.hpp"

namespace prevmatch {

// ---------------------------------------------------------------------------
// lambda schedule

enum class LambdaMode { kWarmupDecay, kFixed, kLinearDecay, kLinearIncrease };

inline const char* lambda_mode_name(LambdaMode m) {
  switch (m) {
    case LambdaMode::kWarmupDecay: return "warmup_decay";
    case LambdaMode::kFixed: return "fixed";
    case LambdaMode::kLinearDecay: return "linear_decay";
    case LambdaMode::kLinearIncrease: return "linear_increase";
  }
  return "?";
}

inline LambdaMode lambda_mode_from(const std::string& s) {
  if (s == "warmup_decay") return LambdaMode::kWarmupDecay;
  if (s == "fixed") return LambdaMode::kFixed;
  if (s == "linear_decay") return LambdaMode::kLinearDecay;
  if (s == "linear_increase") return LambdaMode::kLinearIncrease;
  throw std::invalid_argument("unknown lambda mode '" + s +
                              "' (expected warmup_decay|fixed|linear_decay|linear_increase)");
}

struct LambdaSchedule {
  LambdaMode mode = LambdaMode::kWarmupDecay;
  double lambda_max = 1.0;
  double warmup_frac = 0.3;

  void validate() const {
    if (lambda_max < 0.0) throw std::invalid_argument("LambdaSchedule: lambda_max must be >= 0");
    if (mode == LambdaMode::kWarmupDecay && (warmup_frac <= 0.0 || warmup_frac >= 1.0)) {
      throw std::invalid_argument("LambdaSchedule: warmup_frac must be in (0,1)");
    }
  }

  /// Peak epoch of the warmup+decay ramp; an integer epoch so the peak
  /// value is hit exactly.
  int peak_epoch(int total_epochs) const {
    const int p = static_cast<int>(std::lround(warmup_frac * total_epochs));
    return std::min(std::max(p, 1), std::max(total_epochs - 1, 1));
  }
};

/// Piecewise-linear loss weight at `epoch` of `total_epochs`.
/// warmup_decay rises 0 -> lambda_max over [0, peak] and falls back to 0
/// over [peak, total]; its endpoints are exactly 0 and its peak exactly
/// lambda_max.
inline double lambda_at(const LambdaSchedule& sched, int epoch, int total_epochs) {
  sched.validate();
  if (epoch < 0 || epoch > total_epochs) {
    throw std::invalid_argument("lambda_at: epoch " + std::to_string(epoch) +
                                " outside [0," + std::to_string(total_epochs) + "]");
  }
  if (total_epochs == 0) return 0.0;
  const double e = static_cast<double>(epoch);
  const double total = static_cast<double>(total_epochs);
  switch (sched.mode) {
    case LambdaMode::kFixed:
      return sched.lambda_max;
    case LambdaMode::kLinearDecay:
      return sched.lambda_max * (1.0 - e / total);
    case LambdaMode::kLinearIncrease:
      return sched.lambda_max * (e / total);
    case LambdaMode::kWarmupDecay: {
      const int peak = sched.peak_epoch(total_epochs);
      if (epoch <= peak) return sched.lambda_max * (e / peak);
      return sched.lambda_max * ((total - e) / (total - peak));
    }
  }
  return 0.0;
}

// ---------------------------------------------------------------------------
// losses

struct LossBreakdown {
  double l_s = 0.0;
  double l_u_standard = 0.0;
  double l_u_prev = 0.0;
  double lambda = 0.0;  // weight actually applied (0 when the prev flow is inactive)
  double total = 0.0;   // 0.5 * (l_s + l_u_standard + lambda * l_u_prev)
  double mask_frac_standard = 0.0;
  double mask_frac_prev = 0.0;
};

/// Full-mask cross-entropy of softmax(f(x)) against ground truth.
inline TensorPtr supervised_loss(const SegModel& model, const TensorPtr& x, const LabelMap& y) {
  if (x->shape[0] < 1) throw std::invalid_argument("supervised_loss: empty batch");
  auto probs = softmax_channels(model.forward(x));
  return masked_cross_entropy(probs, y, BoolMap::filled(y.shape, true));
}

/// Pseudo-labels, confidence mask and mask fraction from a weak-view
/// forward. The weak branch is evaluated under stop-gradient: pseudo
/// targets are constants. CutMix descriptors (when given) paste the
/// partner's pseudo-labels and confidences before thresholding, keeping
/// supervision aligned with the mixed strong view.
struct PseudoTargets {
  LabelMap labels;
  BoolMap mask;
  double mask_fraction = 0.0;
};

inline void apply_cutmix_to_targets(LabelMap& labels, std::vector<double>& conf,
                                    const std::vector<std::optional<CutMixDesc>>& descs) {
  const int batch = labels.shape[0];
  const int h = labels.shape[1];
  const int w = labels.shape[2];
  if (static_cast<int>(descs.size()) != batch) {
    throw std::invalid_argument("apply_cutmix_to_targets: descriptor count != batch size");
  }
  const LabelMap base_labels = labels;
  const std::vector<double> base_conf = conf;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int i = 0; i < batch; ++i) {
    if (!descs[static_cast<std::size_t>(i)]) continue;
    const CutMixDesc& d = *descs[static_cast<std::size_t>(i)];
    if (d.partner < 0 || d.partner >= batch) {
      throw std::invalid_argument("apply_cutmix_to_targets: partner index out of range");
    }
    for (int y = d.top; y < d.top + d.height; ++y) {
      const std::size_t dst = static_cast<std::size_t>(i) * plane + static_cast<std::size_t>(y) * w + d.left;
      const std::size_t src =
          static_cast<std::size_t>(d.partner) * plane + static_cast<std::size_t>(y) * w + d.left;
      for (int x = 0; x < d.width; ++x) {
        labels.data[dst + static_cast<std::size_t>(x)] = base_labels.data[src + static_cast<std::size_t>(x)];
        conf[dst + static_cast<std::size_t>(x)] = base_conf[src + static_cast<std::size_t>(x)];
      }
    }
  }
}

inline PseudoTargets make_standard_targets(const SegModel& model, const TensorPtr& weak_batch,
                                           double tau,
                                           const std::vector<std::optional<CutMixDesc>>* cutmix) {
  TensorPtr probs;
  {
    NoGradGuard no_grad;
    probs = softmax_channels(model.forward(weak_batch));
  }
  auto [labels, conf] = argmax_channels(probs);
  if (cutmix) apply_cutmix_to_targets(labels, conf, *cutmix);
  PseudoTargets t;
  t.mask = threshold_mask(conf, labels.shape, tau);
  t.labels = std::move(labels);
  t.mask_fraction = static_cast<double>(t.mask.count()) / static_cast<double>(t.mask.numel());
  return t;
}

/// Standard weak-to-strong consistency loss (self-contained form: runs the
/// x^s forward itself). The epoch loop uses the shared-forward pieces
/// instead, so the strong view is only pushed through the student once.
inline std::pair<TensorPtr, double> standard_unsup_loss(
    const SegModel& model, const TensorPtr& weak_batch, const TensorPtr& strong_batch, double tau,
    const std::vector<std::optional<CutMixDesc>>* cutmix = nullptr) {
  if (weak_batch->shape != strong_batch->shape) {
    throw std::invalid_argument("standard_unsup_loss: weak and strong batches must align, got " +
                                shape_str(weak_batch->shape) + " vs " +
                                shape_str(strong_batch->shape));
  }
  PseudoTargets t = make_standard_targets(model, weak_batch, tau, cutmix);
  auto strong_probs = softmax_channels(model.forward(strong_batch));
  return {masked_cross_entropy(strong_probs, t.labels, t.mask), t.mask_fraction};
}

/// Previous-guidance consistency loss against an already-built guidance
/// batch. Gradients flow only through strong_probs.
inline std::pair<TensorPtr, double> prev_unsup_loss(const GuidanceBatch& guidance,
                                                    const TensorPtr& strong_probs) {
  auto loss = masked_cross_entropy(strong_probs, guidance.pseudo_labels, guidance.mask);
  const double frac =
      static_cast<double>(guidance.mask.count()) / static_cast<double>(guidance.mask.numel());
  return {loss, frac};
}

// ---------------------------------------------------------------------------
// training step

struct StepSettings {
  double tau_standard = 0.95;
  double tau_prev = 0.9;
  int ensemble_upper = 3;
  double dirichlet_alpha = 1.0;
  bool previous_guidance = true;
  bool random_selection = true;
  bool random_weights = true;
  bool cutmix = true;
  int crop = 16;
  AugParams aug;
};

/// One optimization step. Augments both batches, runs the three flows,
/// composes total = 0.5*(L_s + L_u_std + lambda*L_u_prev), backprops and
/// applies one SGD update at the given learning rate. The student's
/// strong-view forward is shared by both unsupervised terms; pseudo-label
/// branches run under stop-gradient; teacher forwards are constants.
/// The previous flow is skipped entirely (and reported with lambda 0)
/// when disabled, when the registry is empty, or when lambda is 0 --
/// which is what makes such runs bit-identical to the baseline.
inline LossBreakdown train_step(SegModel& model, OptimizerState& opt,
                                const std::vector<const Scene*>& labeled_batch,
                                const std::vector<TensorPtr>& unlabeled_batch,
                                const PrevRegistry& registry, const StepSettings& cfg,
                                double lambda, double lr, const CounterRng& master, int epoch,
                                int step) {
  if (labeled_batch.empty() || unlabeled_batch.empty()) {
    throw std::invalid_argument("train_step: batches must be non-empty");
  }
  CounterRng aug_rng = master.fork(rng_site::kAugment, static_cast<std::uint64_t>(epoch),
                                   static_cast<std::uint64_t>(step));

  const int crop = cfg.crop;
  const int ch = labeled_batch[0]->image->shape[0];
  const std::size_t plane = static_cast<std::size_t>(crop) * crop;

  // labeled: weak geometry on image and labels
  const int bl = static_cast<int>(labeled_batch.size());
  auto xl = zeros({bl, ch, crop, crop});
  LabelMap yl = LabelMap::filled({bl, crop, crop}, 0);
  for (int i = 0; i < bl; ++i) {
    WeakView v = weak_augment(aug_rng, *labeled_batch[static_cast<std::size_t>(i)], crop, crop);
    std::copy(v.image->data.begin(), v.image->data.end(),
              xl->data.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(i) * ch * plane));
    std::copy(v.labels.data.begin(), v.labels.data.end(),
              yl.data.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(i) * plane));
  }

  // unlabeled: weak views, then strong views with within-batch cutmix partners
  const int bu = static_cast<int>(unlabeled_batch.size());
  std::vector<TensorPtr> weak_views(static_cast<std::size_t>(bu));
  for (int i = 0; i < bu; ++i) {
    auto [img, rec] = weak_augment(aug_rng, unlabeled_batch[static_cast<std::size_t>(i)], crop, crop);
    weak_views[static_cast<std::size_t>(i)] = img;
  }
  std::vector<std::optional<CutMixDesc>> cutmix_descs(static_cast<std::size_t>(bu));
  auto xw = zeros({bu, ch, crop, crop});
  auto xs = zeros({bu, ch, crop, crop});
  for (int i = 0; i < bu; ++i) {
    int partner = i;
    if (bu > 1) {
      partner = static_cast<int>(aug_rng.uniform_int(static_cast<std::uint64_t>(bu - 1)));
      if (partner >= i) ++partner;
    }
    auto [strong, rec] =
        strong_augment(aug_rng, weak_views[static_cast<std::size_t>(i)],
                       weak_views[static_cast<std::size_t>(partner)], partner,
                       cfg.cutmix && bu > 1, cfg.aug);
    cutmix_descs[static_cast<std::size_t>(i)] = rec.cutmix;
    std::copy(weak_views[static_cast<std::size_t>(i)]->data.begin(),
              weak_views[static_cast<std::size_t>(i)]->data.end(),
              xw->data.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(i) * ch * plane));
    std::copy(strong->data.begin(), strong->data.end(),
              xs->data.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(i) * ch * plane));
  }

  // flows
  auto l_s = supervised_loss(model, xl, yl);

  PseudoTargets std_targets = make_standard_targets(model, xw, cfg.tau_standard, &cutmix_descs);
  auto strong_probs = softmax_channels(model.forward(xs));
  auto l_u_std = masked_cross_entropy(strong_probs, std_targets.labels, std_targets.mask);

  LossBreakdown out;
  out.l_s = l_s->data[0];
  out.l_u_standard = l_u_std->data[0];
  out.mask_frac_standard = std_targets.mask_fraction;

  const bool prev_active = cfg.previous_guidance && !registry.empty() && lambda > 0.0;
  TensorPtr total;
  if (prev_active) {
    CounterRng prev_rng = master.fork(rng_site::kPrevGuidance, static_cast<std::uint64_t>(epoch),
                                      static_cast<std::uint64_t>(step));
    EnsembleDraw draw = draw_ensemble(prev_rng, registry, cfg.ensemble_upper, cfg.dirichlet_alpha,
                                      cfg.random_selection, cfg.random_weights);
    std::vector<const Snapshot*> picked;
    picked.reserve(draw.indices.size());
    for (int idx : draw.indices) picked.push_back(&registry.at(idx));
    GuidanceBatch guidance = ensemble_predict(picked, xw, draw.weights, cfg.tau_prev);
    apply_cutmix_to_targets(guidance.pseudo_labels, guidance.confidence, cutmix_descs);
    guidance.mask = threshold_mask(guidance.confidence, guidance.pseudo_labels.shape, cfg.tau_prev);

    auto [l_u_prev, frac_prev] = prev_unsup_loss(guidance, strong_probs);
    out.l_u_prev = l_u_prev->data[0];
    out.mask_frac_prev = frac_prev;
    out.lambda = lambda;
    total = scale(add(l_s, add(l_u_std, scale(l_u_prev, lambda))), 0.5);
  } else {
    out.l_u_prev = 0.0;
    out.mask_frac_prev = 0.0;
    out.lambda = 0.0;
    total = scale(add(l_s, l_u_std), 0.5);
  }
  out.total = total->data[0];
  if (!std::isfinite(out.total)) {
    throw std::runtime_error("train_step: non-finite loss at epoch " + std::to_string(epoch) +
                             " step " + std::to_string(step));
  }

  model.zero_grad();
  backward(total);
  sgd_step(model, opt, lr);
  return out;
}

// ---------------------------------------------------------------------------
// fit

struct FitConfig {
  StepSettings step;
  LambdaSchedule lambda_sched;
  int epochs = 60;
  int steps_per_epoch = 0;  // 0 = one pass over the unlabeled pool
  int batch_labeled = 4;
  int batch_unlabeled = 4;
  double base_lr = 0.05;
  double momentum = 0.9;
  double poly_power = 0.9;
  int prev_capacity = 8;
  bool save_on_best = true;  // false = interval mode
  int save_interval = 3;
  int pseudo_eval_count = 128;  // 0 = full pool
  std::uint64_t seed = 1;
  int hidden_width = 16;
  int depth = 4;
};

struct ResumeState {
  SegModel model;
  OptimizerState opt;
  PrevRegistry registry{1};
  std::vector<MetricsRecord> history;
  int next_epoch = 1;
};

struct FitResult {
  SegModel model;
  OptimizerState opt;
  PrevRegistry registry{1};
  std::vector<MetricsRecord> history;
  bool stopped_early = false;
  int next_epoch = 1;  // first epoch a resumed run would execute
};

struct FitOptions {
  int stop_after_epoch = 0;  // 0 = run to completion
  std::function<void(const MetricsRecord&)> on_epoch;
  // called after on_epoch with the post-epoch state (for checkpointing)
  std::function<void(const FitResult&)> on_epoch_state;
  std::optional<ResumeState> resume;
};

inline int steps_per_epoch_of(int steps_cfg, int unlabeled_count, int batch_unlabeled) {
  if (steps_cfg > 0) return steps_cfg;
  return (unlabeled_count + batch_unlabeled - 1) / batch_unlabeled;
}

/// The PrevMatch epoch loop. Epochs are numbered 1..E. Each epoch runs
/// its steps, evaluates on the validation split, then saves into the
/// registry (validation precedes saving, so a stored snapshot carries the
/// score of the epoch just validated) and appends a MetricsRecord. Every
/// random draw comes from a substream keyed by (site, epoch, step), so a
/// resumed run replays the remaining epochs exactly.
inline FitResult fit(const FitConfig& cfg, const DatasetSplits& splits, FitOptions options = {}) {
  if (cfg.epochs < 0) throw std::invalid_argument("fit: epochs must be >= 0");
  if (cfg.batch_labeled < 1 || cfg.batch_unlabeled < 1) {
    throw std::invalid_argument("fit: batch sizes must be positive");
  }
  const CounterRng master = CounterRng::seeded(cfg.seed);

  FitResult res;
  if (options.resume) {
    res.model = options.resume->model;
    res.opt = options.resume->opt;
    res.registry = options.resume->registry;
    res.history = options.resume->history;
    res.next_epoch = options.resume->next_epoch;
  } else {
    const int ch = splits.spec.in_channels;
    std::vector<int> widths(static_cast<std::size_t>(std::max(cfg.depth - 1, 0)),
                            cfg.hidden_width);
    res.model = SegModel::init(ch, splits.spec.num_classes, widths, 3,
                               master.fork(rng_site::kModelInit));
    res.opt = OptimizerState::init(res.model, cfg.base_lr, cfg.momentum, cfg.poly_power);
    res.registry = PrevRegistry(cfg.prev_capacity);
    res.next_epoch = 1;
  }

  const auto unlabeled_images = splits.unlabeled_images();
  const int n_unlabeled = static_cast<int>(unlabeled_images.size());
  const int n_labeled = static_cast<int>(splits.labeled.size());
  const int steps = steps_per_epoch_of(cfg.steps_per_epoch, n_unlabeled, cfg.batch_unlabeled);
  const long long total_iters = static_cast<long long>(cfg.epochs) * steps;

  for (int epoch = res.next_epoch; epoch <= cfg.epochs; ++epoch) {
    // per-epoch orders; derived, not carried, so resume replays them
    std::vector<int> unlab_order(static_cast<std::size_t>(n_unlabeled));
    for (int i = 0; i < n_unlabeled; ++i) unlab_order[static_cast<std::size_t>(i)] = i;
    {
      CounterRng r = master.fork(rng_site::kEpochShuffle, static_cast<std::uint64_t>(epoch), 0);
      r.shuffle(unlab_order);
    }
    std::vector<int> lab_order(static_cast<std::size_t>(n_labeled));
    for (int i = 0; i < n_labeled; ++i) lab_order[static_cast<std::size_t>(i)] = i;
    {
      CounterRng r = master.fork(rng_site::kEpochShuffle, static_cast<std::uint64_t>(epoch), 1);
      r.shuffle(lab_order);
    }

    const double lambda =
        cfg.step.previous_guidance ? lambda_at(cfg.lambda_sched, epoch, cfg.epochs) : 0.0;

    double sum_ls = 0.0, sum_lu = 0.0, sum_lp = 0.0, sum_lambda = 0.0;
    double sum_mfs = 0.0, sum_mfp = 0.0;
    for (int step = 0; step < steps; ++step) {
      std::vector<const Scene*> lab_batch;
      for (int j = 0; j < cfg.batch_labeled; ++j) {
        const int idx = lab_order[static_cast<std::size_t>((step * cfg.batch_labeled + j) % n_labeled)];
        lab_batch.push_back(&splits.labeled[static_cast<std::size_t>(idx)]);
      }
      std::vector<TensorPtr> unlab_batch;
      for (int j = 0; j < cfg.batch_unlabeled; ++j) {
        const int idx =
            unlab_order[static_cast<std::size_t>((step * cfg.batch_unlabeled + j) % n_unlabeled)];
        unlab_batch.push_back(unlabeled_images[static_cast<std::size_t>(idx)]);
      }
      const long long iter = static_cast<long long>(epoch - 1) * steps + step;
      const double lr = poly_lr(cfg.base_lr, iter, total_iters, cfg.poly_power);
      LossBreakdown lb = train_step(res.model, res.opt, lab_batch, unlab_batch, res.registry,
                                    cfg.step, lambda, lr, master, epoch, step);
      sum_ls += lb.l_s;
      sum_lu += lb.l_u_standard;
      sum_lp += lb.l_u_prev;
      sum_lambda += lb.lambda;
      sum_mfs += lb.mask_frac_standard;
      sum_mfp += lb.mask_frac_prev;
    }

    // validate, then save (the snapshot carries this epoch's score)
    IouResult val = iou_scores(evaluate_model(res.model, splits.val));
    if (cfg.save_on_best) {
      res.registry.maybe_save(res.model, epoch, val.miou);
    } else {
      res.registry.save_on_interval(res.model, epoch, cfg.save_interval, val.miou);
    }

    MetricsRecord rec;
    rec.epoch = epoch;
    rec.l_s = sum_ls / steps;
    rec.l_u_standard = sum_lu / steps;
    rec.l_u_prev = sum_lp / steps;
    rec.lambda = sum_lambda / steps;
    rec.miou_val = val.miou;
    rec.val_iou = val.per_class;
    rec.pseudo_acc = pseudo_accuracy_on_pool(res.model, splits.unlabeled, cfg.step.tau_standard,
                                             cfg.pseudo_eval_count);
    rec.mask_frac_standard = sum_mfs / steps;
    rec.mask_frac_prev = sum_mfp / steps;
    res.history.push_back(rec);
    res.next_epoch = epoch + 1;
    if (options.on_epoch) options.on_epoch(rec);
    if (options.on_epoch_state) options.on_epoch_state(res);

    if (options.stop_after_epoch > 0 && epoch >= options.stop_after_epoch && epoch < cfg.epochs) {
      res.stopped_early = true;
      return res;
    }
  }
  res.next_epoch = cfg.epochs + 1;
  return res;
}

}  // namespace prevmatch
