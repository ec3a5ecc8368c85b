// Independent reference implementations used to check the library. These
// deliberately share no code with the implementation paths they verify:
// the conv oracle is a plain six-deep loop nest, the softmax oracle runs
// in extended precision, cross-entropy is a scalar per-pixel summation,
// and gradients come from central finite differences.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "prevmatch/nn.hpp"
#include "prevmatch/rng.hpp"
#include "prevmatch/tensor.hpp"

namespace oracle {

/// Direct cross-correlation, zero padding, stride 1: out[b,co,y,x] =
/// bias[co] + sum_{ci,ky,kx} in[b,ci,y+ky-ph,x+kx-pw] * k[co,ci,ky,kx].
inline std::vector<double> conv2d_reference(const std::vector<double>& input, int batch, int cin,
                                            int h, int w, const std::vector<double>& kernel,
                                            int cout, int kh, int kw,
                                            const std::vector<double>& bias) {
  const int ph = kh / 2, pw = kw / 2;
  std::vector<double> out(static_cast<std::size_t>(batch) * cout * h * w, 0.0);
  for (int b = 0; b < batch; ++b)
    for (int co = 0; co < cout; ++co)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          double acc = bias[static_cast<std::size_t>(co)];
          for (int ci = 0; ci < cin; ++ci)
            for (int ky = 0; ky < kh; ++ky)
              for (int kx = 0; kx < kw; ++kx) {
                const int iy = y + ky - ph;
                const int ix = x + kx - pw;
                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                acc += input[((static_cast<std::size_t>(b) * cin + ci) * h + iy) * w + ix] *
                       kernel[((static_cast<std::size_t>(co) * cin + ci) * kh + ky) * kw + kx];
              }
          out[((static_cast<std::size_t>(b) * cout + co) * h + y) * w + x] = acc;
        }
  return out;
}

/// Channel softmax of one pixel in extended precision.
inline std::vector<double> softmax_reference(const std::vector<double>& logits) {
  long double mx = logits[0];
  for (double v : logits) mx = std::max<long double>(mx, v);
  long double denom = 0.0L;
  std::vector<long double> e(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    e[i] = expl(static_cast<long double>(logits[i]) - mx);
    denom += e[i];
  }
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = static_cast<double>(e[i] / denom);
  return out;
}

/// Masked mean of -log p_target, one pixel at a time.
inline double masked_ce_reference(const std::vector<double>& probs, int batch, int c, int h, int w,
                                  const std::vector<int>& targets,
                                  const std::vector<std::uint8_t>& mask) {
  double acc = 0.0;
  std::size_t n = 0;
  for (int b = 0; b < batch; ++b)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const std::size_t px = (static_cast<std::size_t>(b) * h + y) * w + x;
        if (!mask[px]) continue;
        const int t = targets[px];
        acc += -std::log(probs[((static_cast<std::size_t>(b) * c + t) * h + y) * w + x]);
        ++n;
      }
  return n == 0 ? 0.0 : acc / static_cast<double>(n);
}

/// Central finite-difference gradient of `loss_fn` w.r.t. one parameter
/// tensor. loss_fn must re-run the forward pass from scratch.
inline std::vector<double> fd_gradient(const prevmatch::TensorPtr& param,
                                       const std::function<double()>& loss_fn,
                                       double step = 1e-4) {
  std::vector<double> grad(param->numel(), 0.0);
  for (std::size_t i = 0; i < param->numel(); ++i) {
    const double saved = param->data[i];
    param->data[i] = saved + step;
    const double up = loss_fn();
    param->data[i] = saved - step;
    const double down = loss_fn();
    param->data[i] = saved;
    grad[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

/// Max relative error between analytic and finite-difference gradients,
/// with a floor that keeps near-zero pairs from exploding the ratio.
inline double max_rel_error(const std::vector<double>& analytic, const std::vector<double>& fd) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double denom = std::max({1e-6, std::fabs(analytic[i]), std::fabs(fd[i])});
    worst = std::max(worst, std::fabs(analytic[i] - fd[i]) / denom);
  }
  return worst;
}

/// Pearson chi-square statistic for observed counts against probs.
inline double chi_square(const std::vector<std::uint64_t>& counts,
                         const std::vector<double>& probs) {
  std::uint64_t total = 0;
  for (auto c : counts) total += c;
  double stat = 0.0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const double expected = probs[i] * static_cast<double>(total);
    const double d = static_cast<double>(counts[i]) - expected;
    stat += d * d / expected;
  }
  return stat;
}

// chi-square 0.99 quantiles by degrees of freedom
inline double chi_square_crit_99(int df) {
  switch (df) {
    case 1: return 6.635;
    case 2: return 9.210;
    case 3: return 11.345;
    case 4: return 13.277;
    default: return 0.0;
  }
}

/// One-sample Kolmogorov-Smirnov statistic against a CDF. Sorts a copy.
inline double ks_statistic(std::vector<double> samples,
                           const std::function<double(double)>& cdf) {
  std::sort(samples.begin(), samples.end());
  const double n = static_cast<double>(samples.size());
  double d = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double f = cdf(samples[i]);
    d = std::max(d, std::fabs(f - static_cast<double>(i) / n));
    d = std::max(d, std::fabs(static_cast<double>(i + 1) / n - f));
  }
  return d;
}

/// Asymptotic KS critical value at alpha=0.01: 1.628 / sqrt(n).
inline double ks_crit_99(std::size_t n) { return 1.628 / std::sqrt(static_cast<double>(n)); }

/// Random tensor helper for property tests.
inline prevmatch::TensorPtr random_tensor(prevmatch::CounterRng& rng, std::vector<int> shape,
                                          double lo, double hi, bool requires_grad = false) {
  const std::size_t n = prevmatch::shape_numel(shape);
  std::vector<double> data(n);
  for (auto& v : data) v = rng.uniform(lo, hi);
  return prevmatch::make_tensor(std::move(shape), std::move(data), requires_grad);
}

}  // namespace oracle
