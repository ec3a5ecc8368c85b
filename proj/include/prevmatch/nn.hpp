#pragma once

#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "prevmatch/rng.hpp"
#include "prevmatch/tensor.hpp"

namespace prevmatch {

struct ConvLayer {
  TensorPtr kernel;  // [Cout,Cin,k,k]
  TensorPtr bias;    // [Cout]
};

/// Small fully convolutional per-pixel classifier: a stack of same-padded
/// 3x3 conv layers with ReLU between them and raw logits at the end.
/// Spatial size is preserved, so it evaluates on any HxW.
class SegModel {
 public:
  SegModel() = default;

  /// Fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for
  /// kernels and biases. Same seed stream -> bit-identical parameters.
  static SegModel init(int in_channels, int num_classes, const std::vector<int>& hidden_widths,
                       int kernel_size, CounterRng rng) {
    if (in_channels < 1 || num_classes < 1) {
      throw std::invalid_argument("SegModel: channels and classes must be positive");
    }
    if (kernel_size % 2 == 0) {
      throw std::invalid_argument("SegModel: kernel size must be odd");
    }
    SegModel m;
    m.in_channels_ = in_channels;
    m.num_classes_ = num_classes;
    m.hidden_widths_ = hidden_widths;
    m.kernel_size_ = kernel_size;

    std::vector<int> widths;
    widths.push_back(in_channels);
    for (int hw : hidden_widths) widths.push_back(hw);
    widths.push_back(num_classes);

    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
      const int cin = widths[l];
      const int cout = widths[l + 1];
      auto layer_rng = rng.fork(static_cast<std::uint64_t>(l));
      const double bound = 1.0 / std::sqrt(static_cast<double>(cin) * kernel_size * kernel_size);
      std::vector<double> kdata(static_cast<std::size_t>(cout) * cin * kernel_size * kernel_size);
      for (auto& v : kdata) v = layer_rng.uniform(-bound, bound);
      std::vector<double> bdata(static_cast<std::size_t>(cout));
      for (auto& v : bdata) v = layer_rng.uniform(-bound, bound);
      m.layers_.push_back(
          {make_tensor({cout, cin, kernel_size, kernel_size}, std::move(kdata), true),
           make_tensor({cout}, std::move(bdata), true)});
    }
    return m;
  }

  /// Logits for input [B,in_channels,H,W] -> [B,num_classes,H,W].
  TensorPtr forward(const TensorPtr& x) const {
    if (x->shape.size() != 4 || x->shape[1] != in_channels_) {
      throw std::invalid_argument("SegModel::forward: expected [B," +
                                  std::to_string(in_channels_) + ",H,W], got " +
                                  shape_str(x->shape));
    }
    TensorPtr h = x;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      h = conv2d(h, layers_[l].kernel, layers_[l].bias);
      if (l + 1 < layers_.size()) h = relu(h);
    }
    return h;
  }

  std::vector<TensorPtr> parameters() const {
    std::vector<TensorPtr> ps;
    for (const auto& l : layers_) {
      ps.push_back(l.kernel);
      ps.push_back(l.bias);
    }
    return ps;
  }

  std::vector<std::string> parameter_names() const {
    std::vector<std::string> names;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      names.push_back("layer" + std::to_string(l) + ".kernel");
      names.push_back("layer" + std::to_string(l) + ".bias");
    }
    return names;
  }

  /// Deep copy with fresh storage. requires_grad=false makes the copy a
  /// constant teacher: its forwards never record graph nodes.
  SegModel clone_detached() const {
    SegModel m;
    m.in_channels_ = in_channels_;
    m.num_classes_ = num_classes_;
    m.hidden_widths_ = hidden_widths_;
    m.kernel_size_ = kernel_size_;
    for (const auto& l : layers_) {
      m.layers_.push_back({make_tensor(l.kernel->shape, l.kernel->data, false),
                           make_tensor(l.bias->shape, l.bias->data, false)});
    }
    return m;
  }

  void zero_grad() const {
    for (const auto& p : parameters()) p->zero_grad();
  }

  int in_channels() const { return in_channels_; }
  int num_classes() const { return num_classes_; }
  const std::vector<int>& hidden_widths() const { return hidden_widths_; }
  int kernel_size() const { return kernel_size_; }
  const std::vector<ConvLayer>& layers() const { return layers_; }
  std::vector<ConvLayer>& layers() { return layers_; }

 private:
  int in_channels_ = 0;
  int num_classes_ = 0;
  int kernel_size_ = 3;
  std::vector<int> hidden_widths_;
  std::vector<ConvLayer> layers_;
};

// ---------------------------------------------------------------------------
// optimizer

/// SGD with classical momentum: v <- m*v + g; p <- p - lr*v.
struct OptimizerState {
  std::vector<std::vector<double>> momentum_buffers;
  double base_lr = 0.0;
  double momentum = 0.0;
  double power = 1.0;

  static OptimizerState init(const SegModel& model, double base_lr, double momentum,
                             double power) {
    if (!(base_lr > 0.0)) throw std::invalid_argument("OptimizerState: base_lr must be > 0");
    if (momentum < 0.0 || momentum >= 1.0) {
      throw std::invalid_argument("OptimizerState: momentum must be in [0,1)");
    }
    if (!(power > 0.0)) throw std::invalid_argument("OptimizerState: power must be > 0");
    OptimizerState s;
    s.base_lr = base_lr;
    s.momentum = momentum;
    s.power = power;
    for (const auto& p : model.parameters()) s.momentum_buffers.emplace_back(p->numel(), 0.0);
    return s;
  }
};

/// base_lr * (1 - iter/total)^power. iter beyond total clamps to 0 and
/// warns once on stderr.
inline double poly_lr(double base_lr, long long iter, long long total_iters, double power) {
  if (iter < 0) throw std::invalid_argument("poly_lr: iter must be >= 0");
  if (total_iters <= 0) throw std::invalid_argument("poly_lr: total_iters must be positive");
  if (iter > total_iters) {
    static bool warned = false;
    if (!warned) {
      std::fprintf(stderr, "warning: poly_lr iter %lld beyond total %lld, clamping lr to 0\n",
                   iter, total_iters);
      warned = true;
    }
    return 0.0;
  }
  const double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(total_iters);
  return base_lr * std::pow(frac, power);
}

/// One momentum-SGD update over all parameters, reading Tensor::grad.
/// Aborts with the parameter name on non-finite gradients.
inline void sgd_step(const SegModel& model, OptimizerState& state, double lr) {
  auto params = model.parameters();
  auto names = model.parameter_names();
  if (params.size() != state.momentum_buffers.size()) {
    throw std::invalid_argument("sgd_step: optimizer state does not match model parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    auto& v = state.momentum_buffers[i];
    if (p.grad.size() != p.data.size()) {
      throw std::invalid_argument("sgd_step: parameter " + names[i] + " has no gradient");
    }
    if (v.size() != p.data.size()) {
      throw std::invalid_argument("sgd_step: momentum buffer shape mismatch for " + names[i]);
    }
    for (std::size_t j = 0; j < p.data.size(); ++j) {
      const double g = p.grad[j];
      if (!std::isfinite(g)) {
        throw std::runtime_error("sgd_step: non-finite gradient in " + names[i] + " at index " +
                                 std::to_string(j));
      }
      v[j] = state.momentum * v[j] + g;
      p.data[j] -= lr * v[j];
    }
  }
}

// ---------------------------------------------------------------------------
// prediction helpers

/// Per-pixel argmax over channels, ties broken by lowest class id.
/// Also returns the winning probability for confidence thresholding.
inline std::pair<LabelMap, std::vector<double>> argmax_channels(const TensorPtr& probs) {
  if (probs->shape.size() != 4) {
    throw std::invalid_argument("argmax_channels: expected rank 4 [B,C,H,W], got " +
                                shape_str(probs->shape));
  }
  const int batch = probs->shape[0];
  const int ch = probs->shape[1];
  const int h = probs->shape[2];
  const int w = probs->shape[3];
  const std::size_t plane = static_cast<std::size_t>(h) * w;

  LabelMap labels = LabelMap::filled({batch, h, w}, 0);
  std::vector<double> conf(static_cast<std::size_t>(batch) * plane, 0.0);
  for (int b = 0; b < batch; ++b) {
    const double* p = probs->data.data() + static_cast<std::size_t>(b) * ch * plane;
    int* lab = labels.data.data() + static_cast<std::size_t>(b) * plane;
    double* cf = conf.data() + static_cast<std::size_t>(b) * plane;
    for (std::size_t px = 0; px < plane; ++px) {
      int best = 0;
      double bestv = p[px];
      for (int c = 1; c < ch; ++c) {
        const double v = p[static_cast<std::size_t>(c) * plane + px];
        if (v > bestv) {  // strict: ties keep the lowest class id
          bestv = v;
          best = c;
        }
      }
      lab[px] = best;
      cf[px] = bestv;
    }
  }
  return {std::move(labels), std::move(conf)};
}

inline BoolMap threshold_mask(const std::vector<double>& conf, const std::vector<int>& shape,
                              double tau) {
  BoolMap m = BoolMap::filled(shape, false);
  if (conf.size() != m.numel()) {
    throw std::invalid_argument("threshold_mask: confidence length does not match shape");
  }
  for (std::size_t i = 0; i < conf.size(); ++i) m.data[i] = conf[i] >= tau ? 1 : 0;
  return m;
}

}  // namespace prevmatch
