#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "prevmatch/rng.hpp"
#include "prevmatch/tensor.hpp"

namespace prevmatch {

/// One synthetic scene: per-pixel features plus a dense label map.
/// image is [in_channels, H, W]; labels is [H, W] with values in [0, C).
struct Scene {
  TensorPtr image;
  LabelMap labels;
};

/// Generation recipe. Class 0 is background; classes 1..C-1 are shapes
/// painted on 7x7 tiles (all motifs cover exactly kShapeArea pixels, so
/// class pixel mass is proportional to the class draw frequency).
/// The shifted test domain reuses the same recipe with feature_offset and
/// shifted_weights swapped in.
struct SceneSpec {
  int height = 20;
  int width = 20;
  int in_channels = 3;
  int num_classes = 5;
  std::vector<double> shape_weights;    // classes 1..C-1, non-negative
  double noise_level = 0.6;
  int min_shapes = 3;
  int max_shapes = 6;
  double feature_offset = 0.0;          // added to every channel before clipping
  double shift_offset = 0.4;            // offset used by shifted_variant()
  std::vector<double> shifted_weights;  // weights used by shifted_variant()

  static constexpr int kTile = 7;       // placement tile, all motifs fit inside
  static constexpr int kShapeArea = 21; // painted pixels per motif
  static constexpr double kFeatureClip = 3.0;

  void validate() const {
    if (height < 8 || width < 8) {
      throw std::invalid_argument("SceneSpec: height and width must be >= 8, shapes are unplaceable below that");
    }
    if (in_channels < 1) throw std::invalid_argument("SceneSpec: in_channels must be >= 1");
    if (num_classes < 1) throw std::invalid_argument("SceneSpec: num_classes must be >= 1");
    if (shape_weights.size() != static_cast<std::size_t>(num_classes - 1)) {
      throw std::invalid_argument("SceneSpec: shape_weights must have one entry per non-background class");
    }
    for (double w : shape_weights) {
      if (w < 0.0 || !std::isfinite(w)) {
        throw std::invalid_argument("SceneSpec: shape weights must be finite and non-negative");
      }
    }
    if (noise_level < 0.0) throw std::invalid_argument("SceneSpec: noise_level must be >= 0");
    if (min_shapes < 0 || max_shapes < min_shapes) {
      throw std::invalid_argument("SceneSpec: need 0 <= min_shapes <= max_shapes");
    }
    if (!shifted_weights.empty() &&
        shifted_weights.size() != static_cast<std::size_t>(num_classes - 1)) {
      throw std::invalid_argument("SceneSpec: shifted_weights must match shape_weights length");
    }
  }

  SceneSpec shifted_variant() const {
    SceneSpec s = *this;
    s.feature_offset = feature_offset + shift_offset;
    if (!shifted_weights.empty()) s.shape_weights = shifted_weights;
    return s;
  }

  /// Class feature signature. Background is the zero vector; shape classes
  /// get equally spaced phase patterns that sum to zero across channels
  /// (for in_channels >= 2), so the class mix does not move the global
  /// feature mean.
  double signature(int cls, int channel) const {
    if (cls == 0) return 0.0;
    const double theta =
        2.0 * 3.14159265358979323846 * (static_cast<double>(cls - 1) / std::max(1, num_classes - 1)) + 0.5;
    const double phase = 2.0 * 3.14159265358979323846 * channel / in_channels;
    return std::cos(theta + phase);
  }
};

namespace detail {

enum class Motif { kRect, kDisk, kStripes };

inline Motif motif_for_class(int cls) {
  switch ((cls - 1) % 3) {
    case 0: return Motif::kRect;
    case 1: return Motif::kDisk;
    default: return Motif::kStripes;
  }
}

/// Pixel offsets of a motif inside the 7x7 tile. Every motif paints
/// exactly SceneSpec::kShapeArea pixels.
inline const std::vector<std::pair<int, int>>& motif_pixels(Motif m, bool transposed) {
  auto build = [](Motif mm, bool tr) {
    std::vector<std::pair<int, int>> px;
    switch (mm) {
      case Motif::kRect:
        for (int y = 2; y <= 4; ++y)
          for (int x = 0; x <= 6; ++x) px.emplace_back(y, x);
        break;
      case Motif::kDisk:
        for (int y = 0; y <= 6; ++y)
          for (int x = 0; x <= 6; ++x) {
            const double dy = y - 3.0, dx = x - 3.0;
            if (dy * dy + dx * dx <= 7.84) px.emplace_back(y, x);
          }
        break;
      case Motif::kStripes:
        for (int y : {1, 3, 5})
          for (int x = 0; x <= 6; ++x) px.emplace_back(y, x);
        break;
    }
    if (tr)
      for (auto& p : px) std::swap(p.first, p.second);
    return px;
  };
  static const std::vector<std::pair<int, int>> tables[6] = {
      build(Motif::kRect, false),    build(Motif::kRect, true),
      build(Motif::kDisk, false),    build(Motif::kDisk, true),
      build(Motif::kStripes, false), build(Motif::kStripes, true)};
  return tables[static_cast<int>(m) * 2 + (transposed ? 1 : 0)];
}

/// Weighted class draw over classes 1..C-1; returns 0 when all weights
/// vanish (no shape painted).
inline int sample_shape_class(CounterRng& rng, const std::vector<double>& weights) {
  double total = 0.0;
  for (double w : weights) total += w;
  if (total <= 0.0) return 0;
  const double r = rng.next_double() * total;
  double cum = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    cum += weights[i];
    if (r < cum) return static_cast<int>(i) + 1;
  }
  return static_cast<int>(weights.size());
}

}  // namespace detail

/// Deterministic scene synthesis: n ~ U{min_shapes..max_shapes} shape draws,
/// each (class, orientation, tile position); tiles never overlap (rejection
/// with a bounded retry budget; placement draws are class-independent, so
/// painted pixel counts per class follow a thinned multinomial in the
/// shape weights). Features are the class signature plus feature_offset
/// plus N(0, noise_level^2) noise, clipped to [-3, 3].
inline Scene generate_scene(CounterRng& rng, const SceneSpec& spec) {
  spec.validate();
  const int h = spec.height;
  const int w = spec.width;
  const int tile = SceneSpec::kTile;

  LabelMap labels = LabelMap::filled({h, w}, 0);
  std::vector<std::uint8_t> claimed(static_cast<std::size_t>(h) * w, 0);

  const int n_shapes =
      spec.min_shapes + static_cast<int>(rng.uniform_int(
                            static_cast<std::uint64_t>(spec.max_shapes - spec.min_shapes + 1)));
  for (int s = 0; s < n_shapes; ++s) {
    const int cls = detail::sample_shape_class(rng, spec.shape_weights);
    const bool transposed = rng.bernoulli(0.5);  // drawn for every motif kind
    if (cls == 0) continue;
    for (int attempt = 0; attempt < 16; ++attempt) {
      const int top = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(h - tile + 1)));
      const int left = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(w - tile + 1)));
      bool free = true;
      for (int y = top; y < top + tile && free; ++y)
        for (int x = left; x < left + tile; ++x)
          if (claimed[static_cast<std::size_t>(y) * w + x]) {
            free = false;
            break;
          }
      if (!free) continue;
      for (int y = top; y < top + tile; ++y)
        for (int x = left; x < left + tile; ++x) claimed[static_cast<std::size_t>(y) * w + x] = 1;
      for (const auto& [dy, dx] : detail::motif_pixels(detail::motif_for_class(cls), transposed)) {
        labels.data[static_cast<std::size_t>(top + dy) * w + (left + dx)] = cls;
      }
      break;
    }
  }

  auto image = zeros({spec.in_channels, h, w});
  for (int c = 0; c < spec.in_channels; ++c) {
    double* plane = image->data.data() + static_cast<std::size_t>(c) * h * w;
    for (std::size_t px = 0; px < static_cast<std::size_t>(h) * w; ++px) {
      double v = spec.signature(labels.data[px], c) + spec.feature_offset;
      if (spec.noise_level > 0.0) v += spec.noise_level * rng.normal();
      plane[px] = std::clamp(v, -SceneSpec::kFeatureClip, SceneSpec::kFeatureClip);
    }
  }
  return Scene{std::move(image), std::move(labels)};
}

// ---------------------------------------------------------------------------
// splits

struct SplitCounts {
  int labeled = 20;
  int unlabeled = 500;
  int val = 50;
  int test = 100;
  int shifted = 100;

  void validate() const {
    if (labeled < 1 || unlabeled < 1 || val < 1 || test < 1 || shifted < 1) {
      throw std::invalid_argument("SplitCounts: all split sizes must be positive");
    }
  }
};

/// All data for one experiment. Unlabeled scenes retain their labels as
/// hidden ground truth; the trainer only ever receives unlabeled_images()
/// (images without labels) while the metrics module reads the scenes
/// directly for pseudo-label accuracy.
struct DatasetSplits {
  std::vector<Scene> labeled;
  std::vector<Scene> unlabeled;
  std::vector<Scene> val;
  std::vector<Scene> test;
  std::vector<Scene> shifted_test;
  std::uint64_t seed = 0;
  SceneSpec spec;

  /// Training view of the unlabeled pool: images only.
  std::vector<TensorPtr> unlabeled_images() const {
    std::vector<TensorPtr> imgs;
    imgs.reserve(unlabeled.size());
    for (const auto& s : unlabeled) imgs.push_back(s.image);
    return imgs;
  }
};

/// Splits are disjoint by construction: scene i of split s draws from the
/// substream fork(kSceneGen, global_index) where global indices never
/// repeat across splits. Same (seed, spec, counts) -> bit-identical data.
inline DatasetSplits make_splits(std::uint64_t seed, const SplitCounts& counts,
                                 const SceneSpec& spec) {
  counts.validate();
  spec.validate();
  DatasetSplits out;
  out.seed = seed;
  out.spec = spec;
  const CounterRng master = CounterRng::seeded(seed);
  std::uint64_t index = 0;
  auto gen = [&](std::vector<Scene>& dst, int n, const SceneSpec& s) {
    dst.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      CounterRng r = master.fork(rng_site::kSceneGen, index++);
      dst.push_back(generate_scene(r, s));
    }
  };
  gen(out.labeled, counts.labeled, spec);
  gen(out.unlabeled, counts.unlabeled, spec);
  gen(out.val, counts.val, spec);
  gen(out.test, counts.test, spec);
  gen(out.shifted_test, counts.shifted, spec.shifted_variant());
  return out;
}

// ---------------------------------------------------------------------------
// augmentation

/// Fixed strong-augmentation magnitudes (not part of TrainConfig).
struct AugParams {
  double channel_scale_mag = 0.25;  // per-channel gain in [1-m, 1+m]
  double channel_shift_mag = 0.25;  // per-channel offset in [-m, m]
  double grayscale_prob = 0.2;
  double blur_prob = 0.3;
  double cutmix_prob = 0.5;
  double cutmix_frac_lo = 0.2;
  double cutmix_frac_hi = 0.5;
};

struct PhotoParams {
  std::vector<double> channel_scale;  // empty means identity
  std::vector<double> channel_shift;
  bool grayscale = false;
  bool blur = false;
};

struct CutMixDesc {
  int partner = -1;  // batch index the rectangle is copied from
  int top = 0, left = 0, height = 0, width = 0;
  double drawn_frac = 0.0;  // the sampled area fraction the rect realizes

  std::size_t area() const { return static_cast<std::size_t>(height) * width; }
};

/// Full record of one sample's augmentation lineage. flip+crop define the
/// weak view; photo+cutmix define the strong view derived from it.
struct AugRecord {
  bool flip = false;
  int crop_top = 0, crop_left = 0, crop_height = 0, crop_width = 0;
  PhotoParams photo;
  std::optional<CutMixDesc> cutmix;
};

inline TensorPtr flip_horizontal(const TensorPtr& image) {
  const int ch = image->shape[0];
  const int h = image->shape[1];
  const int w = image->shape[2];
  auto out = zeros(image->shape);
  for (int c = 0; c < ch; ++c)
    for (int y = 0; y < h; ++y) {
      const double* src = image->data.data() + (static_cast<std::size_t>(c) * h + y) * w;
      double* dst = out->data.data() + (static_cast<std::size_t>(c) * h + y) * w;
      for (int x = 0; x < w; ++x) dst[x] = src[w - 1 - x];
    }
  return out;
}

inline LabelMap flip_horizontal(const LabelMap& labels) {
  const int h = labels.shape[0];
  const int w = labels.shape[1];
  LabelMap out = LabelMap::filled(labels.shape, 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      out.data[static_cast<std::size_t>(y) * w + x] =
          labels.data[static_cast<std::size_t>(y) * w + (w - 1 - x)];
  return out;
}

/// Sample the weak transform: horizontal flip with p=0.5, then a random
/// crop to (crop_h, crop_w). The record fully determines the transform.
inline AugRecord sample_weak_record(CounterRng& rng, int h, int w, int crop_h, int crop_w) {
  if (crop_h > h || crop_w > w || crop_h < 1 || crop_w < 1) {
    throw std::invalid_argument("weak_augment: crop " + std::to_string(crop_h) + "x" +
                                std::to_string(crop_w) + " does not fit source " +
                                std::to_string(h) + "x" + std::to_string(w));
  }
  AugRecord rec;
  rec.flip = rng.bernoulli(0.5);
  rec.crop_top = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(h - crop_h + 1)));
  rec.crop_left = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(w - crop_w + 1)));
  rec.crop_height = crop_h;
  rec.crop_width = crop_w;
  return rec;
}

/// Apply the weak part of a record (flip, then crop in the flipped frame).
inline TensorPtr apply_weak(const AugRecord& rec, const TensorPtr& image) {
  TensorPtr src = rec.flip ? flip_horizontal(image) : image;
  const int ch = src->shape[0];
  const int w = src->shape[2];
  auto out = zeros({ch, rec.crop_height, rec.crop_width});
  for (int c = 0; c < ch; ++c)
    for (int y = 0; y < rec.crop_height; ++y) {
      const double* srow = src->data.data() +
                           (static_cast<std::size_t>(c) * src->shape[1] + rec.crop_top + y) * w +
                           rec.crop_left;
      double* drow =
          out->data.data() + (static_cast<std::size_t>(c) * rec.crop_height + y) * rec.crop_width;
      std::copy(srow, srow + rec.crop_width, drow);
    }
  return out;
}

inline LabelMap apply_weak(const AugRecord& rec, const LabelMap& labels) {
  LabelMap src = rec.flip ? flip_horizontal(labels) : labels;
  const int w = src.shape[1];
  LabelMap out = LabelMap::filled({rec.crop_height, rec.crop_width}, 0);
  for (int y = 0; y < rec.crop_height; ++y)
    for (int x = 0; x < rec.crop_width; ++x)
      out.data[static_cast<std::size_t>(y) * rec.crop_width + x] =
          src.data[static_cast<std::size_t>(rec.crop_top + y) * w + (rec.crop_left + x)];
  return out;
}

/// Weakly augmented view of a scene with the geometry applied to both the
/// image and its labels.
struct WeakView {
  TensorPtr image;
  LabelMap labels;
  AugRecord record;
};

inline WeakView weak_augment(CounterRng& rng, const Scene& scene, int crop_h, int crop_w) {
  AugRecord rec = sample_weak_record(rng, scene.image->shape[1], scene.image->shape[2], crop_h, crop_w);
  return WeakView{apply_weak(rec, scene.image), apply_weak(rec, scene.labels), rec};
}

inline std::pair<TensorPtr, AugRecord> weak_augment(CounterRng& rng, const TensorPtr& image,
                                                    int crop_h, int crop_w) {
  AugRecord rec = sample_weak_record(rng, image->shape[1], image->shape[2], crop_h, crop_w);
  return {apply_weak(rec, image), rec};
}

namespace detail {

inline TensorPtr box_blur3(const TensorPtr& image) {
  const int ch = image->shape[0];
  const int h = image->shape[1];
  const int w = image->shape[2];
  auto out = zeros(image->shape);
  for (int c = 0; c < ch; ++c) {
    const double* in = image->data.data() + static_cast<std::size_t>(c) * h * w;
    double* o = out->data.data() + static_cast<std::size_t>(c) * h * w;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double acc = 0.0;
        int n = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int yy = y + dy, xx = x + dx;
            if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
            acc += in[static_cast<std::size_t>(yy) * w + xx];
            ++n;
          }
        o[static_cast<std::size_t>(y) * w + x] = acc / n;
      }
  }
  return out;
}

/// Rectangle of ~frac*H*W pixels with near-square aspect, clamped inside.
inline CutMixDesc sample_cutmix_rect(CounterRng& rng, int h, int w, double frac) {
  const double area = frac * h * w;
  int rh = static_cast<int>(std::lround(std::sqrt(area * h / w)));
  rh = std::clamp(rh, 1, h);
  int rw = static_cast<int>(std::lround(area / rh));
  rw = std::clamp(rw, 1, w);
  CutMixDesc d;
  d.height = rh;
  d.width = rw;
  d.top = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(h - rh + 1)));
  d.left = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(w - rw + 1)));
  d.drawn_frac = frac;
  return d;
}

}  // namespace detail

/// Strong view on top of a weak view: per-channel affine jitter, optional
/// grayscale collapse, optional box blur, then CutMix with probability
/// cutmix_prob (a rectangle of the partner's weak view replaces the
/// region). Photometric ops never move pixels, so strong stays aligned
/// with weak; only the CutMix rectangle changes provenance, and the
/// returned descriptor lets the trainer mix pseudo-labels with the exact
/// same mask.
inline std::pair<TensorPtr, AugRecord> strong_augment(CounterRng& rng, const TensorPtr& own_weak,
                                                      const TensorPtr& partner_weak,
                                                      int partner_index, bool enable_cutmix,
                                                      const AugParams& params = {}) {
  if (own_weak->shape != partner_weak->shape) {
    throw std::invalid_argument("strong_augment: views must share shape, got " +
                                shape_str(own_weak->shape) + " vs " +
                                shape_str(partner_weak->shape));
  }
  const int ch = own_weak->shape[0];
  const int h = own_weak->shape[1];
  const int w = own_weak->shape[2];
  AugRecord rec;
  rec.crop_height = h;
  rec.crop_width = w;

  rec.photo.channel_scale.resize(static_cast<std::size_t>(ch));
  rec.photo.channel_shift.resize(static_cast<std::size_t>(ch));
  for (int c = 0; c < ch; ++c) {
    rec.photo.channel_scale[static_cast<std::size_t>(c)] =
        rng.uniform(1.0 - params.channel_scale_mag, 1.0 + params.channel_scale_mag);
    rec.photo.channel_shift[static_cast<std::size_t>(c)] =
        rng.uniform(-params.channel_shift_mag, params.channel_shift_mag);
  }
  rec.photo.grayscale = rng.bernoulli(params.grayscale_prob);
  rec.photo.blur = rng.bernoulli(params.blur_prob);

  auto out = make_tensor(own_weak->shape, own_weak->data);
  for (int c = 0; c < ch; ++c) {
    const double a = rec.photo.channel_scale[static_cast<std::size_t>(c)];
    const double b = rec.photo.channel_shift[static_cast<std::size_t>(c)];
    double* plane = out->data.data() + static_cast<std::size_t>(c) * h * w;
    for (std::size_t px = 0; px < static_cast<std::size_t>(h) * w; ++px)
      plane[px] = a * plane[px] + b;
  }
  if (rec.photo.grayscale && ch > 1) {
    for (std::size_t px = 0; px < static_cast<std::size_t>(h) * w; ++px) {
      double mean = 0.0;
      for (int c = 0; c < ch; ++c) mean += out->data[static_cast<std::size_t>(c) * h * w + px];
      mean /= ch;
      for (int c = 0; c < ch; ++c) out->data[static_cast<std::size_t>(c) * h * w + px] = mean;
    }
  }
  if (rec.photo.blur) out = detail::box_blur3(out);

  if (enable_cutmix && rng.bernoulli(params.cutmix_prob)) {
    const double frac = rng.uniform(params.cutmix_frac_lo, params.cutmix_frac_hi);
    CutMixDesc d = detail::sample_cutmix_rect(rng, h, w, frac);
    d.partner = partner_index;
    for (int c = 0; c < ch; ++c)
      for (int y = d.top; y < d.top + d.height; ++y) {
        const double* src =
            partner_weak->data.data() + (static_cast<std::size_t>(c) * h + y) * w + d.left;
        double* dst = out->data.data() + (static_cast<std::size_t>(c) * h + y) * w + d.left;
        std::copy(src, src + d.width, dst);
      }
    rec.cutmix = d;
  }
  return {out, rec};
}

/// Paste the cutmix rectangle of partner-owned values into dst; used to
/// keep pseudo-labels and confidence masks aligned with the mixed image.
template <typename Map>
inline void cutmix_paste(Map& dst, const Map& partner, const CutMixDesc& d) {
  if (dst.shape != partner.shape || dst.shape.size() != 2) {
    throw std::invalid_argument("cutmix_paste: expected matching [H,W] maps");
  }
  const int w = dst.shape[1];
  for (int y = d.top; y < d.top + d.height; ++y)
    for (int x = d.left; x < d.left + d.width; ++x)
      dst.data[static_cast<std::size_t>(y) * w + x] =
          partner.data[static_cast<std::size_t>(y) * w + x];
}

}  // namespace prevmatch
