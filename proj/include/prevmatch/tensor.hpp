#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace prevmatch {

class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

inline std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor shape dimensions must be positive");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Dense row-major double tensor and reverse-mode autodiff node.
///
/// Op results hold shared pointers to their parents plus a closure that
/// scatters the node's grad into the parents' grads. Gradient accumulation
/// is additive; callers reset grads explicitly (see zero_grad) before a
/// fresh backward pass.
class Tensor : public std::enable_shared_from_this<Tensor> {
 public:
  std::vector<int> shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // same length as data when requires_grad

  // autodiff graph; empty for leaves and for results built under NoGradGuard
  std::vector<TensorPtr> parents;
  std::function<void()> backward_fn;

  Tensor(std::vector<int> s, std::vector<double> d, bool req)
      : shape(std::move(s)), data(std::move(d)), requires_grad(req) {
    if (data.size() != shape_numel(shape)) {
      throw std::invalid_argument("tensor data length " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
    }
    if (requires_grad) grad.assign(data.size(), 0.0);
  }

  std::size_t numel() const { return data.size(); }

  int dim(std::size_t axis) const { return shape[axis]; }

  void zero_grad() {
    if (requires_grad) std::fill(grad.begin(), grad.end(), 0.0);
  }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

inline TensorPtr make_tensor(std::vector<int> shape, std::vector<double> data,
                             bool requires_grad = false) {
  return std::make_shared<Tensor>(std::move(shape), std::move(data), requires_grad);
}

inline TensorPtr zeros(std::vector<int> shape, bool requires_grad = false) {
  std::size_t n = shape_numel(shape);
  return std::make_shared<Tensor>(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

inline TensorPtr full(std::vector<int> shape, double value, bool requires_grad = false) {
  std::size_t n = shape_numel(shape);
  return std::make_shared<Tensor>(std::move(shape), std::vector<double>(n, value), requires_grad);
}

inline TensorPtr scalar_tensor(double value, bool requires_grad = false) {
  return make_tensor({1}, {value}, requires_grad);
}

/// Integer label map (class ids), shape-parallel to the spatial part of a
/// prediction tensor. Used for ground truth, pseudo-labels and masks.
struct LabelMap {
  std::vector<int> shape;
  std::vector<int> data;

  LabelMap() = default;
  LabelMap(std::vector<int> s, std::vector<int> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != shape_numel(shape)) {
      throw std::invalid_argument("label map data length does not match shape " + shape_str(shape));
    }
  }
  static LabelMap filled(std::vector<int> s, int value) {
    std::size_t n = shape_numel(s);
    return LabelMap(std::move(s), std::vector<int>(n, value));
  }
  std::size_t numel() const { return data.size(); }
  bool operator==(const LabelMap& o) const { return shape == o.shape && data == o.data; }
};

struct BoolMap {
  std::vector<int> shape;
  std::vector<std::uint8_t> data;

  BoolMap() = default;
  BoolMap(std::vector<int> s, std::vector<std::uint8_t> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != shape_numel(shape)) {
      throw std::invalid_argument("mask data length does not match shape " + shape_str(shape));
    }
  }
  static BoolMap filled(std::vector<int> s, bool value) {
    std::size_t n = shape_numel(s);
    return BoolMap(std::move(s), std::vector<std::uint8_t>(n, value ? 1 : 0));
  }
  std::size_t numel() const { return data.size(); }
  std::size_t count() const {
    std::size_t c = 0;
    for (auto v : data) c += v ? 1 : 0;
    return c;
  }
  bool operator==(const BoolMap& o) const { return shape == o.shape && data == o.data; }
};

// ---------------------------------------------------------------------------
// grad mode

class GradMode {
 public:
  static bool enabled() { return flag_(); }
  static void set_enabled(bool on) { flag_() = on; }

 private:
  static bool& flag_() {
    thread_local bool enabled = true;
    return enabled;
  }
};

/// RAII stop-gradient scope: ops built inside record no graph.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

namespace detail {

inline bool tracks(const TensorPtr& t) { return t->requires_grad; }

/// Wire a freshly built result into the graph when grad mode is on and any
/// parent participates. Returns the result for chaining.
inline TensorPtr record(TensorPtr result, std::vector<TensorPtr> parents,
                        std::function<void()> backward) {
  bool need = GradMode::enabled();
  if (need) {
    need = false;
    for (const auto& p : parents)
      if (p->requires_grad) need = true;
  }
  if (need) {
    result->requires_grad = true;
    result->ensure_grad();
    result->parents = std::move(parents);
    result->backward_fn = std::move(backward);
  }
  return result;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise / reduction ops

inline TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
  if (a->shape != b->shape) {
    throw std::invalid_argument("add: shape mismatch " + shape_str(a->shape) + " vs " +
                                shape_str(b->shape));
  }
  auto out = zeros(a->shape);
  for (std::size_t i = 0; i < a->numel(); ++i) out->data[i] = a->data[i] + b->data[i];
  Tensor* ap = a.get();
  Tensor* bp = b.get();
  Tensor* op = out.get();
  return detail::record(out, {a, b}, [ap, bp, op]() {
    if (ap->requires_grad) {
      ap->ensure_grad();
      for (std::size_t i = 0; i < op->grad.size(); ++i) ap->grad[i] += op->grad[i];
    }
    if (bp->requires_grad) {
      bp->ensure_grad();
      for (std::size_t i = 0; i < op->grad.size(); ++i) bp->grad[i] += op->grad[i];
    }
  });
}

inline TensorPtr scale(const TensorPtr& a, double s) {
  auto out = zeros(a->shape);
  for (std::size_t i = 0; i < a->numel(); ++i) out->data[i] = s * a->data[i];
  Tensor* ap = a.get();
  Tensor* op = out.get();
  return detail::record(out, {a}, [ap, op, s]() {
    if (!ap->requires_grad) return;
    ap->ensure_grad();
    for (std::size_t i = 0; i < op->grad.size(); ++i) ap->grad[i] += s * op->grad[i];
  });
}

inline TensorPtr sum(const TensorPtr& a) {
  double total = 0.0;
  for (double v : a->data) total += v;
  auto out = scalar_tensor(total);
  Tensor* ap = a.get();
  Tensor* op = out.get();
  return detail::record(out, {a}, [ap, op]() {
    if (!ap->requires_grad) return;
    ap->ensure_grad();
    const double g = op->grad[0];
    for (std::size_t i = 0; i < ap->grad.size(); ++i) ap->grad[i] += g;
  });
}

inline TensorPtr relu(const TensorPtr& a) {
  auto out = zeros(a->shape);
  for (std::size_t i = 0; i < a->numel(); ++i) out->data[i] = a->data[i] > 0.0 ? a->data[i] : 0.0;
  Tensor* ap = a.get();
  Tensor* op = out.get();
  return detail::record(out, {a}, [ap, op]() {
    if (!ap->requires_grad) return;
    ap->ensure_grad();
    for (std::size_t i = 0; i < op->grad.size(); ++i)
      if (ap->data[i] > 0.0) ap->grad[i] += op->grad[i];
  });
}

// ---------------------------------------------------------------------------
// conv2d

namespace detail {

/// Shift-and-accumulate 2D cross-correlation plane update:
/// out[oy, ox] += k * in[oy + dy, ox + dx] over the in-bounds window.
/// The inner loop is contiguous in both planes, which is what makes the
/// whole network fast enough for the multi-seed experiments.
inline void axpy_shifted_plane(double* out, const double* in, double k, int h, int w, int dy,
                               int dx) {
  const int oy0 = std::max(0, -dy);
  const int oy1 = h - 1 - std::max(0, dy);
  const int ox0 = std::max(0, -dx);
  const int ox1 = w - 1 - std::max(0, dx);
  if (oy0 > oy1 || ox0 > ox1) return;
  const int len = ox1 - ox0 + 1;
  for (int oy = oy0; oy <= oy1; ++oy) {
    double* orow = out + static_cast<std::size_t>(oy) * w + ox0;
    const double* irow = in + static_cast<std::size_t>(oy + dy) * w + (ox0 + dx);
    for (int i = 0; i < len; ++i) orow[i] += k * irow[i];
  }
}

/// Dot of two shifted planes: sum_{oy,ox} a[oy, ox] * b[oy + dy, ox + dx].
inline double dot_shifted_plane(const double* a, const double* b, int h, int w, int dy, int dx) {
  const int oy0 = std::max(0, -dy);
  const int oy1 = h - 1 - std::max(0, dy);
  const int ox0 = std::max(0, -dx);
  const int ox1 = w - 1 - std::max(0, dx);
  if (oy0 > oy1 || ox0 > ox1) return 0.0;
  const int len = ox1 - ox0 + 1;
  double acc = 0.0;
  for (int oy = oy0; oy <= oy1; ++oy) {
    const double* arow = a + static_cast<std::size_t>(oy) * w + ox0;
    const double* brow = b + static_cast<std::size_t>(oy + dy) * w + (ox0 + dx);
    for (int i = 0; i < len; ++i) acc += arow[i] * brow[i];
  }
  return acc;
}

}  // namespace detail

/// Cross-correlation with zero "same" padding, stride 1.
/// input [B,Cin,H,W], kernel [Cout,Cin,kh,kw] (kh, kw odd), bias [Cout]
/// -> [B,Cout,H,W]. Differentiable w.r.t. all three inputs.
inline TensorPtr conv2d(const TensorPtr& input, const TensorPtr& kernel, const TensorPtr& bias) {
  if (input->shape.size() != 4) {
    throw std::invalid_argument("conv2d: input must be rank 4 [B,Cin,H,W], got " +
                                shape_str(input->shape));
  }
  if (kernel->shape.size() != 4) {
    throw std::invalid_argument("conv2d: kernel must be rank 4 [Cout,Cin,kh,kw], got " +
                                shape_str(kernel->shape));
  }
  const int batch = input->shape[0];
  const int cin = input->shape[1];
  const int h = input->shape[2];
  const int w = input->shape[3];
  const int cout = kernel->shape[0];
  const int kh = kernel->shape[2];
  const int kw = kernel->shape[3];
  if (kernel->shape[1] != cin) {
    throw std::invalid_argument(
        "conv2d: channel axis mismatch: input axis 1 (Cin) = " + std::to_string(cin) +
        " but kernel axis 1 = " + std::to_string(kernel->shape[1]));
  }
  if (kh % 2 == 0 || kw % 2 == 0) {
    throw std::invalid_argument("conv2d: kernel spatial axes (2, 3) must be odd, got " +
                                std::to_string(kh) + "x" + std::to_string(kw));
  }
  if (bias->shape != std::vector<int>{cout}) {
    throw std::invalid_argument("conv2d: bias axis 0 must equal Cout = " + std::to_string(cout) +
                                ", got " + shape_str(bias->shape));
  }
  const int ph = kh / 2;
  const int pw = kw / 2;
  const std::size_t plane = static_cast<std::size_t>(h) * w;

  auto out = zeros({batch, cout, h, w});
  for (int b = 0; b < batch; ++b) {
    for (int co = 0; co < cout; ++co) {
      double* oplane = out->data.data() + (static_cast<std::size_t>(b) * cout + co) * plane;
      const double bval = bias->data[static_cast<std::size_t>(co)];
      std::fill(oplane, oplane + plane, bval);
      for (int ci = 0; ci < cin; ++ci) {
        const double* iplane = input->data.data() + (static_cast<std::size_t>(b) * cin + ci) * plane;
        const double* kbase =
            kernel->data.data() + ((static_cast<std::size_t>(co) * cin + ci) * kh) * kw;
        for (int ky = 0; ky < kh; ++ky) {
          for (int kx = 0; kx < kw; ++kx) {
            detail::axpy_shifted_plane(oplane, iplane, kbase[ky * kw + kx], h, w, ky - ph, kx - pw);
          }
        }
      }
    }
  }

  Tensor* in_p = input.get();
  Tensor* k_p = kernel.get();
  Tensor* b_p = bias.get();
  Tensor* out_p = out.get();
  auto backward = [in_p, k_p, b_p, out_p, batch, cin, cout, h, w, kh, kw, ph, pw, plane]() {
    const double* g = out_p->grad.data();
    if (b_p->requires_grad) {
      b_p->ensure_grad();
      for (int b = 0; b < batch; ++b) {
        for (int co = 0; co < cout; ++co) {
          const double* gplane = g + (static_cast<std::size_t>(b) * cout + co) * plane;
          double acc = 0.0;
          for (std::size_t i = 0; i < plane; ++i) acc += gplane[i];
          b_p->grad[static_cast<std::size_t>(co)] += acc;
        }
      }
    }
    if (k_p->requires_grad) {
      k_p->ensure_grad();
      for (int b = 0; b < batch; ++b) {
        for (int co = 0; co < cout; ++co) {
          const double* gplane = g + (static_cast<std::size_t>(b) * cout + co) * plane;
          for (int ci = 0; ci < cin; ++ci) {
            const double* iplane =
                in_p->data.data() + (static_cast<std::size_t>(b) * cin + ci) * plane;
            double* kg = k_p->grad.data() + ((static_cast<std::size_t>(co) * cin + ci) * kh) * kw;
            for (int ky = 0; ky < kh; ++ky)
              for (int kx = 0; kx < kw; ++kx)
                kg[ky * kw + kx] +=
                    detail::dot_shifted_plane(gplane, iplane, h, w, ky - ph, kx - pw);
          }
        }
      }
    }
    if (in_p->requires_grad) {
      in_p->ensure_grad();
      for (int b = 0; b < batch; ++b) {
        for (int ci = 0; ci < cin; ++ci) {
          double* igplane = in_p->grad.data() + (static_cast<std::size_t>(b) * cin + ci) * plane;
          for (int co = 0; co < cout; ++co) {
            const double* gplane = g + (static_cast<std::size_t>(b) * cout + co) * plane;
            const double* kbase =
                k_p->data.data() + ((static_cast<std::size_t>(co) * cin + ci) * kh) * kw;
            for (int ky = 0; ky < kh; ++ky)
              for (int kx = 0; kx < kw; ++kx)
                detail::axpy_shifted_plane(igplane, gplane, kbase[ky * kw + kx], h, w,
                                           -(ky - ph), -(kx - pw));
          }
        }
      }
    }
  };
  return detail::record(out, {input, kernel, bias}, std::move(backward));
}

// ---------------------------------------------------------------------------
// softmax over the channel axis

/// Per-pixel channel softmax of logits [B,C,H,W], stabilized by
/// max-subtraction. Each pixel's channel vector sums to 1.
inline TensorPtr softmax_channels(const TensorPtr& logits) {
  if (logits->shape.size() != 4) {
    throw std::invalid_argument("softmax_channels: expected rank 4 [B,C,H,W], got " +
                                shape_str(logits->shape));
  }
  const int batch = logits->shape[0];
  const int ch = logits->shape[1];
  const int h = logits->shape[2];
  const int w = logits->shape[3];
  const std::size_t plane = static_cast<std::size_t>(h) * w;

  auto out = zeros(logits->shape);
  for (int b = 0; b < batch; ++b) {
    const double* in = logits->data.data() + static_cast<std::size_t>(b) * ch * plane;
    double* o = out->data.data() + static_cast<std::size_t>(b) * ch * plane;
    for (std::size_t px = 0; px < plane; ++px) {
      double mx = in[px];
      for (int c = 1; c < ch; ++c) mx = std::max(mx, in[static_cast<std::size_t>(c) * plane + px]);
      double denom = 0.0;
      for (int c = 0; c < ch; ++c) {
        const double e = std::exp(in[static_cast<std::size_t>(c) * plane + px] - mx);
        o[static_cast<std::size_t>(c) * plane + px] = e;
        denom += e;
      }
      const double inv = 1.0 / denom;
      for (int c = 0; c < ch; ++c) o[static_cast<std::size_t>(c) * plane + px] *= inv;
    }
  }

  Tensor* in_p = logits.get();
  Tensor* out_p = out.get();
  auto backward = [in_p, out_p, batch, ch, plane]() {
    if (!in_p->requires_grad) return;
    in_p->ensure_grad();
    // d logit_c = p_c * (g_c - sum_j g_j p_j)
    for (int b = 0; b < batch; ++b) {
      const std::size_t base = static_cast<std::size_t>(b) * ch * plane;
      const double* p = out_p->data.data() + base;
      const double* g = out_p->grad.data() + base;
      double* ig = in_p->grad.data() + base;
      for (std::size_t px = 0; px < plane; ++px) {
        double dot = 0.0;
        for (int c = 0; c < ch; ++c) {
          const std::size_t i = static_cast<std::size_t>(c) * plane + px;
          dot += g[i] * p[i];
        }
        for (int c = 0; c < ch; ++c) {
          const std::size_t i = static_cast<std::size_t>(c) * plane + px;
          ig[i] += p[i] * (g[i] - dot);
        }
      }
    }
  };
  return detail::record(out, {logits}, std::move(backward));
}

// ---------------------------------------------------------------------------
// masked cross-entropy

/// Mean of -log p[target] over masked-in pixels of probs [B,C,H,W].
/// Empty mask yields exactly 0 with zero gradient everywhere. The
/// denominator is the masked-in pixel count.
inline TensorPtr masked_cross_entropy(const TensorPtr& probs, const LabelMap& targets,
                                      const BoolMap& mask) {
  if (probs->shape.size() != 4) {
    throw std::invalid_argument("masked_cross_entropy: probs must be rank 4 [B,C,H,W], got " +
                                shape_str(probs->shape));
  }
  const int batch = probs->shape[0];
  const int ch = probs->shape[1];
  const int h = probs->shape[2];
  const int w = probs->shape[3];
  const std::vector<int> spatial{batch, h, w};
  if (targets.shape != spatial) {
    throw std::invalid_argument("masked_cross_entropy: targets shape " + shape_str(targets.shape) +
                                " does not match probs spatial axes " + shape_str(spatial));
  }
  if (mask.shape != spatial) {
    throw std::invalid_argument("masked_cross_entropy: mask shape " + shape_str(mask.shape) +
                                " does not match probs spatial axes " + shape_str(spatial));
  }
  const std::size_t plane = static_cast<std::size_t>(h) * w;

  std::size_t n_in = 0;
  double acc = 0.0;
  for (int b = 0; b < batch; ++b) {
    const double* p = probs->data.data() + static_cast<std::size_t>(b) * ch * plane;
    const int* t = targets.data.data() + static_cast<std::size_t>(b) * plane;
    const std::uint8_t* m = mask.data.data() + static_cast<std::size_t>(b) * plane;
    for (std::size_t px = 0; px < plane; ++px) {
      if (!m[px]) continue;
      const int cls = t[px];
      if (cls < 0 || cls >= ch) {
        const int py = static_cast<int>(px) / w;
        const int pxx = static_cast<int>(px) % w;
        throw std::out_of_range("masked_cross_entropy: target id " + std::to_string(cls) +
                                " out of range [0," + std::to_string(ch) + ") at pixel (b=" +
                                std::to_string(b) + ",y=" + std::to_string(py) + ",x=" +
                                std::to_string(pxx) + ")");
      }
      ++n_in;
      // floor keeps the result finite even for a fully saturated wrong pixel
      acc += -std::log(std::max(p[static_cast<std::size_t>(cls) * plane + px], 1e-300));
    }
  }
  auto out = scalar_tensor(n_in == 0 ? 0.0 : acc / static_cast<double>(n_in));

  Tensor* p_p = probs.get();
  Tensor* out_p = out.get();
  // copy the small maps so the closure owns them
  auto tgt_copy = std::make_shared<LabelMap>(targets);
  auto mask_copy = std::make_shared<BoolMap>(mask);
  auto backward = [p_p, out_p, tgt_copy, mask_copy, batch, ch, plane, n_in]() {
    if (!p_p->requires_grad || n_in == 0) return;
    p_p->ensure_grad();
    const double gscale = out_p->grad[0] / static_cast<double>(n_in);
    for (int b = 0; b < batch; ++b) {
      const double* p = p_p->data.data() + static_cast<std::size_t>(b) * ch * plane;
      double* pg = p_p->grad.data() + static_cast<std::size_t>(b) * ch * plane;
      const int* t = tgt_copy->data.data() + static_cast<std::size_t>(b) * plane;
      const std::uint8_t* m = mask_copy->data.data() + static_cast<std::size_t>(b) * plane;
      for (std::size_t px = 0; px < plane; ++px) {
        if (!m[px]) continue;
        const std::size_t i = static_cast<std::size_t>(t[px]) * plane + px;
        pg[i] += gscale * (-1.0 / std::max(p[i], 1e-300));
      }
    }
  };
  return detail::record(out, {probs}, std::move(backward));
}

// ---------------------------------------------------------------------------
// backward

/// Reverse-mode pass from a scalar loss. Gradients accumulate additively
/// into every reachable requires_grad tensor; calling twice without
/// zeroing doubles them.
inline void backward(const TensorPtr& loss) {
  if (loss->numel() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_str(loss->shape));
  }
  // iterative post-order topological sort
  std::vector<Tensor*> order;
  std::vector<std::pair<Tensor*, std::size_t>> stack;
  std::vector<const Tensor*> seen;
  auto visited = [&seen](const Tensor* t) {
    return std::find(seen.begin(), seen.end(), t) != seen.end();
  };
  stack.emplace_back(loss.get(), 0);
  seen.push_back(loss.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Tensor* child = node->parents[next].get();
      ++next;
      if (!visited(child)) {
        seen.push_back(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss->ensure_grad();
  loss->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn();
  }
}

}  // namespace prevmatch
