#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <unordered_set>
#include <utility>
#include <vector>

#include "spa/tensor.hpp"

namespace spa {

enum class OpKind {
  kMatMul,
  kConv2d,
  kRelu,
  kSoftmax,
  kAvgPool2,
  kGlobalAvgPool,
  kLog,
  kMul,
  kAdd,
  kScale,
  kMean,
  kSum,
  kCrossEntropy,
  kEntropy,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::kMatMul: return "matmul";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kRelu: return "relu";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kAvgPool2: return "avg_pool2";
    case OpKind::kGlobalAvgPool: return "global_avg_pool";
    case OpKind::kLog: return "log";
    case OpKind::kMul: return "mul";
    case OpKind::kAdd: return "add";
    case OpKind::kScale: return "scale";
    case OpKind::kMean: return "mean";
    case OpKind::kSum: return "sum";
    case OpKind::kCrossEntropy: return "cross_entropy";
    case OpKind::kEntropy: return "entropy";
  }
  return "?";
}

struct Conv2dOpts {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

namespace detail {

// Direct convolution, NCHW layout, written so the inner x-loops are
// contiguous on both sides and auto-vectorize.
inline void conv2d_forward(const double* x, const double* w, const double* b,
                           double* y, std::size_t n_batch, std::size_t ci,
                           std::size_t h, std::size_t wd, std::size_t co,
                           std::size_t kh, std::size_t kw, std::size_t stride,
                           std::size_t pad, std::size_t ho, std::size_t wo) {
  const std::ptrdiff_t p = static_cast<std::ptrdiff_t>(pad);
  for (std::size_t n = 0; n < n_batch; ++n) {
    for (std::size_t oc = 0; oc < co; ++oc) {
      double* ymap = y + (n * co + oc) * ho * wo;
      const double bias = b ? b[oc] : 0.0;
      for (std::size_t i = 0; i < ho * wo; ++i) ymap[i] = bias;
      for (std::size_t ic = 0; ic < ci; ++ic) {
        const double* xmap = x + (n * ci + ic) * h * wd;
        const double* wk = w + ((oc * ci + ic) * kh) * kw;
        for (std::size_t ky = 0; ky < kh; ++ky) {
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const double wv = wk[ky * kw + kx];
            if (wv == 0.0 && stride == 1) continue;
            if (stride == 1) {
              const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - p;
              const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - p;
              const std::size_t oy0 = dy < 0 ? static_cast<std::size_t>(-dy) : 0;
              const std::size_t oy1 =
                  std::min(ho, dy > 0 ? h - static_cast<std::size_t>(dy) : h);
              const std::size_t ox0 = dx < 0 ? static_cast<std::size_t>(-dx) : 0;
              const std::size_t ox1 =
                  std::min(wo, dx > 0 ? wd - static_cast<std::size_t>(dx) : wd);
              for (std::size_t oy = oy0; oy < oy1; ++oy) {
                const double* xrow = xmap + (oy + dy) * wd + dx;
                double* yrow = ymap + oy * wo;
                for (std::size_t ox = ox0; ox < ox1; ++ox)
                  yrow[ox] += wv * xrow[ox];
              }
            } else {
              for (std::size_t oy = 0; oy < ho; ++oy) {
                const std::ptrdiff_t iy =
                    static_cast<std::ptrdiff_t>(oy * stride + ky) - p;
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                for (std::size_t ox = 0; ox < wo; ++ox) {
                  const std::ptrdiff_t ix =
                      static_cast<std::ptrdiff_t>(ox * stride + kx) - p;
                  if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                  ymap[oy * wo + ox] += wv * xmap[iy * wd + ix];
                }
              }
            }
          }
        }
      }
    }
  }
}

inline void conv2d_backward(const double* x, const double* w, const double* gy,
                            double* gx, double* gw, double* gb,
                            std::size_t n_batch, std::size_t ci, std::size_t h,
                            std::size_t wd, std::size_t co, std::size_t kh,
                            std::size_t kw, std::size_t stride, std::size_t pad,
                            std::size_t ho, std::size_t wo) {
  const std::ptrdiff_t p = static_cast<std::ptrdiff_t>(pad);
  for (std::size_t n = 0; n < n_batch; ++n) {
    for (std::size_t oc = 0; oc < co; ++oc) {
      const double* gymap = gy + (n * co + oc) * ho * wo;
      if (gb) {
        double acc = 0.0;
        for (std::size_t i = 0; i < ho * wo; ++i) acc += gymap[i];
        gb[oc] += acc;
      }
      for (std::size_t ic = 0; ic < ci; ++ic) {
        const double* xmap = x + (n * ci + ic) * h * wd;
        double* gxmap = gx ? gx + (n * ci + ic) * h * wd : nullptr;
        for (std::size_t ky = 0; ky < kh; ++ky) {
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const std::size_t widx = ((oc * ci + ic) * kh + ky) * kw + kx;
            const double wv = w[widx];
            if (stride == 1) {
              const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - p;
              const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - p;
              const std::size_t oy0 = dy < 0 ? static_cast<std::size_t>(-dy) : 0;
              const std::size_t oy1 =
                  std::min(ho, dy > 0 ? h - static_cast<std::size_t>(dy) : h);
              const std::size_t ox0 = dx < 0 ? static_cast<std::size_t>(-dx) : 0;
              const std::size_t ox1 =
                  std::min(wo, dx > 0 ? wd - static_cast<std::size_t>(dx) : wd);
              double wacc = 0.0;
              for (std::size_t oy = oy0; oy < oy1; ++oy) {
                const double* xrow = xmap + (oy + dy) * wd + dx;
                const double* gyrow = gymap + oy * wo;
                double* gxrow = gxmap ? gxmap + (oy + dy) * wd + dx : nullptr;
                if (gw) {
                  double acc = 0.0;
                  for (std::size_t ox = ox0; ox < ox1; ++ox)
                    acc += gyrow[ox] * xrow[ox];
                  wacc += acc;
                }
                if (gxrow) {
                  for (std::size_t ox = ox0; ox < ox1; ++ox)
                    gxrow[ox] += wv * gyrow[ox];
                }
              }
              if (gw) gw[widx] += wacc;
            } else {
              double wacc = 0.0;
              for (std::size_t oy = 0; oy < ho; ++oy) {
                const std::ptrdiff_t iy =
                    static_cast<std::ptrdiff_t>(oy * stride + ky) - p;
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                for (std::size_t ox = 0; ox < wo; ++ox) {
                  const std::ptrdiff_t ix =
                      static_cast<std::ptrdiff_t>(ox * stride + kx) - p;
                  if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                  const double g = gymap[oy * wo + ox];
                  wacc += g * xmap[iy * wd + ix];
                  if (gxmap) gxmap[iy * wd + ix] += wv * g;
                }
              }
              if (gw) gw[widx] += wacc;
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

// Reverse-mode tape. Operations record one node each; backward() runs the
// recorded rules in reverse, accumulating adjoints directly in Tensor::grad.
// Grads of tensors produced on the tape are recomputed per call; grads of
// leaves (parameters, inputs) accumulate across calls until zero_grad(), so
// multi-term objectives can sum gradients before one optimizer step.
class Graph {
 public:
  struct Node {
    OpKind kind;
    std::vector<TensorPtr> inputs;
    TensorPtr output;
    std::function<void()> backward;
  };

  TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
    if (a->shape.size() != 2 || b->shape.size() != 2 ||
        a->shape[1] != b->shape[0])
      throw ShapeError("matmul", a->shape, b->shape);
    const std::size_t n = a->shape[0], k = a->shape[1], m = b->shape[1];
    auto out = make_result({n, m}, {a, b});
    const double* av = a->values.data();
    const double* bv = b->values.data();
    double* ov = out->values.data();
    for (std::size_t i = 0; i < n; ++i) {
      double* orow = ov + i * m;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const double s = av[i * k + kk];
        const double* brow = bv + kk * m;
        for (std::size_t j = 0; j < m; ++j) orow[j] += s * brow[j];
      }
    }
    record(OpKind::kMatMul, {a, b}, out, [a, b, out, n, k, m] {
      const double* g = out->grad.data();
      if (a->requires_grad) {
        double* ga = a->grad.data();
        const double* bv = b->values.data();
        for (std::size_t i = 0; i < n; ++i) {
          const double* grow = g + i * m;
          for (std::size_t kk = 0; kk < k; ++kk) {
            const double* brow = bv + kk * m;
            double acc = 0.0;
            for (std::size_t j = 0; j < m; ++j) acc += grow[j] * brow[j];
            ga[i * k + kk] += acc;
          }
        }
      }
      if (b->requires_grad) {
        double* gb = b->grad.data();
        const double* av = a->values.data();
        for (std::size_t kk = 0; kk < k; ++kk)
          for (std::size_t i = 0; i < n; ++i) {
            const double s = av[i * k + kk];
            const double* grow = g + i * m;
            double* gbrow = gb + kk * m;
            for (std::size_t j = 0; j < m; ++j) gbrow[j] += s * grow[j];
          }
      }
    });
    return out;
  }

  // 2-D convolution over NCHW input; weight is (Cout, Cin, kh, kw), bias is
  // optional (Cout). 1x1 kernels realize the vocabulary layer.
  TensorPtr conv2d(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b,
                   Conv2dOpts opts = {}) {
    if (x->shape.size() != 4 || w->shape.size() != 4 ||
        x->shape[1] != w->shape[1])
      throw ShapeError("conv2d", x->shape, w->shape);
    const std::size_t n = x->shape[0], ci = x->shape[1], h = x->shape[2],
                      wd = x->shape[3];
    const std::size_t co = w->shape[0], kh = w->shape[2], kw = w->shape[3];
    if (b && (b->shape.size() != 1 || b->shape[0] != co))
      throw ShapeError("conv2d", w->shape, b->shape);
    if (h + 2 * opts.pad < kh || wd + 2 * opts.pad < kw)
      throw ShapeError("conv2d", "kernel " + shape_str(w->shape) +
                                     " larger than padded input " +
                                     shape_str(x->shape));
    const std::size_t ho = (h + 2 * opts.pad - kh) / opts.stride + 1;
    const std::size_t wo = (wd + 2 * opts.pad - kw) / opts.stride + 1;
    std::vector<TensorPtr> ins{x, w};
    if (b) ins.push_back(b);
    auto out = make_result({n, co, ho, wo}, ins);
    detail::conv2d_forward(x->values.data(), w->values.data(),
                           b ? b->values.data() : nullptr, out->values.data(),
                           n, ci, h, wd, co, kh, kw, opts.stride, opts.pad, ho,
                           wo);
    record(OpKind::kConv2d, ins, out,
           [x, w, b, out, n, ci, h, wd, co, kh, kw, opts, ho, wo] {
             detail::conv2d_backward(
                 x->values.data(), w->values.data(), out->grad.data(),
                 x->requires_grad ? x->grad.data() : nullptr,
                 w->requires_grad ? w->grad.data() : nullptr,
                 (b && b->requires_grad) ? b->grad.data() : nullptr, n, ci, h,
                 wd, co, kh, kw, opts.stride, opts.pad, ho, wo);
           });
    return out;
  }

  TensorPtr relu(const TensorPtr& x) {
    auto out = make_result(x->shape, {x});
    const std::size_t n = x->size();
    for (std::size_t i = 0; i < n; ++i)
      out->values[i] = x->values[i] > 0.0 ? x->values[i] : 0.0;
    record(OpKind::kRelu, {x}, out, [x, out, n] {
      if (!x->requires_grad) return;
      for (std::size_t i = 0; i < n; ++i)
        if (x->values[i] > 0.0) x->grad[i] += out->grad[i];
    });
    return out;
  }

  // Softmax over the channel axis: axis 0 for rank-1 tensors, axis 1
  // otherwise (each (batch, spatial...) position normalized independently).
  TensorPtr softmax(const TensorPtr& x) {
    if (x->shape.empty()) throw ShapeError("softmax", x->shape, Shape{});
    auto out = make_result(x->shape, {x});
    for_each_channel_slice(*x, [&](std::size_t base, std::size_t stride,
                                   std::size_t k) {
      double mx = x->values[base];
      for (std::size_t c = 1; c < k; ++c)
        mx = std::max(mx, x->values[base + c * stride]);
      double denom = 0.0;
      for (std::size_t c = 0; c < k; ++c) {
        const double e = std::exp(x->values[base + c * stride] - mx);
        out->values[base + c * stride] = e;
        denom += e;
      }
      for (std::size_t c = 0; c < k; ++c) out->values[base + c * stride] /= denom;
    });
    record(OpKind::kSoftmax, {x}, out, [x, out] {
      if (!x->requires_grad) return;
      for_each_channel_slice(
          *x, [&](std::size_t base, std::size_t stride, std::size_t k) {
            double dot = 0.0;
            for (std::size_t c = 0; c < k; ++c) {
              const std::size_t i = base + c * stride;
              dot += out->grad[i] * out->values[i];
            }
            for (std::size_t c = 0; c < k; ++c) {
              const std::size_t i = base + c * stride;
              x->grad[i] += out->values[i] * (out->grad[i] - dot);
            }
          });
    });
    return out;
  }

  // 2x spatial downsample by 2x2 average pooling; H and W must be even.
  TensorPtr avg_pool2(const TensorPtr& x) {
    if (x->shape.size() != 4 || x->shape[2] % 2 || x->shape[3] % 2)
      throw ShapeError("avg_pool2", x->shape, Shape{});
    const std::size_t n = x->shape[0], c = x->shape[1], h = x->shape[2],
                      w = x->shape[3];
    auto out = make_result({n, c, h / 2, w / 2}, {x});
    const std::size_t ho = h / 2, wo = w / 2;
    for (std::size_t m = 0; m < n * c; ++m) {
      const double* xm = x->values.data() + m * h * w;
      double* om = out->values.data() + m * ho * wo;
      for (std::size_t y = 0; y < ho; ++y)
        for (std::size_t xx = 0; xx < wo; ++xx)
          om[y * wo + xx] =
              0.25 * (xm[(2 * y) * w + 2 * xx] + xm[(2 * y) * w + 2 * xx + 1] +
                      xm[(2 * y + 1) * w + 2 * xx] +
                      xm[(2 * y + 1) * w + 2 * xx + 1]);
    }
    record(OpKind::kAvgPool2, {x}, out, [x, out, n, c, h, w, ho, wo] {
      if (!x->requires_grad) return;
      for (std::size_t m = 0; m < n * c; ++m) {
        double* gx = x->grad.data() + m * h * w;
        const double* go = out->grad.data() + m * ho * wo;
        for (std::size_t y = 0; y < ho; ++y)
          for (std::size_t xx = 0; xx < wo; ++xx) {
            const double g = 0.25 * go[y * wo + xx];
            gx[(2 * y) * w + 2 * xx] += g;
            gx[(2 * y) * w + 2 * xx + 1] += g;
            gx[(2 * y + 1) * w + 2 * xx] += g;
            gx[(2 * y + 1) * w + 2 * xx + 1] += g;
          }
      }
    });
    return out;
  }

  // Global average pooling over spatial axes: (N,C,H,W) -> (N,C).
  TensorPtr global_avg_pool(const TensorPtr& x) {
    if (x->shape.size() != 4) throw ShapeError("global_avg_pool", x->shape, Shape{});
    const std::size_t n = x->shape[0], c = x->shape[1],
                      hw = x->shape[2] * x->shape[3];
    auto out = make_result({n, c}, {x});
    for (std::size_t m = 0; m < n * c; ++m) {
      const double* xm = x->values.data() + m * hw;
      double acc = 0.0;
      for (std::size_t i = 0; i < hw; ++i) acc += xm[i];
      out->values[m] = acc / static_cast<double>(hw);
    }
    record(OpKind::kGlobalAvgPool, {x}, out, [x, out, n, c, hw] {
      if (!x->requires_grad) return;
      for (std::size_t m = 0; m < n * c; ++m) {
        const double g = out->grad[m] / static_cast<double>(hw);
        double* gx = x->grad.data() + m * hw;
        for (std::size_t i = 0; i < hw; ++i) gx[i] += g;
      }
    });
    return out;
  }

  TensorPtr log(const TensorPtr& x) {
    auto out = make_result(x->shape, {x});
    for (std::size_t i = 0; i < x->size(); ++i)
      out->values[i] = std::log(x->values[i]);
    record(OpKind::kLog, {x}, out, [x, out] {
      if (!x->requires_grad) return;
      for (std::size_t i = 0; i < x->size(); ++i)
        x->grad[i] += out->grad[i] / x->values[i];
    });
    return out;
  }

  TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
    if (a->shape != b->shape) throw ShapeError("mul", a->shape, b->shape);
    auto out = make_result(a->shape, {a, b});
    for (std::size_t i = 0; i < a->size(); ++i)
      out->values[i] = a->values[i] * b->values[i];
    record(OpKind::kMul, {a, b}, out, [a, b, out] {
      for (std::size_t i = 0; i < out->size(); ++i) {
        if (a->requires_grad) a->grad[i] += out->grad[i] * b->values[i];
        if (b->requires_grad) b->grad[i] += out->grad[i] * a->values[i];
      }
    });
    return out;
  }

  // Elementwise add; also accepts (N,M) + (M) row broadcast for biases.
  TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
    const bool broadcast = a->shape.size() == 2 && b->shape.size() == 1 &&
                           a->shape[1] == b->shape[0];
    if (!broadcast && a->shape != b->shape)
      throw ShapeError("add", a->shape, b->shape);
    auto out = make_result(a->shape, {a, b});
    if (broadcast) {
      const std::size_t n = a->shape[0], m = a->shape[1];
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j)
          out->values[i * m + j] = a->values[i * m + j] + b->values[j];
    } else {
      for (std::size_t i = 0; i < a->size(); ++i)
        out->values[i] = a->values[i] + b->values[i];
    }
    record(OpKind::kAdd, {a, b}, out, [a, b, out, broadcast] {
      if (a->requires_grad)
        for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[i];
      if (b->requires_grad) {
        if (broadcast) {
          const std::size_t n = a->shape[0], m = a->shape[1];
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j)
              b->grad[j] += out->grad[i * m + j];
        } else {
          for (std::size_t i = 0; i < b->size(); ++i)
            b->grad[i] += out->grad[i];
        }
      }
    });
    return out;
  }

  TensorPtr scale(const TensorPtr& x, double c) {
    auto out = make_result(x->shape, {x});
    for (std::size_t i = 0; i < x->size(); ++i) out->values[i] = c * x->values[i];
    record(OpKind::kScale, {x}, out, [x, out, c] {
      if (!x->requires_grad) return;
      for (std::size_t i = 0; i < x->size(); ++i) x->grad[i] += c * out->grad[i];
    });
    return out;
  }

  TensorPtr mean(const TensorPtr& x) {
    auto out = make_result({1}, {x});
    double acc = 0.0;
    for (const double v : x->values) acc += v;
    out->values[0] = acc / static_cast<double>(x->size());
    record(OpKind::kMean, {x}, out, [x, out] {
      if (!x->requires_grad) return;
      const double g = out->grad[0] / static_cast<double>(x->size());
      for (std::size_t i = 0; i < x->size(); ++i) x->grad[i] += g;
    });
    return out;
  }

  TensorPtr sum(const TensorPtr& x) {
    auto out = make_result({1}, {x});
    double acc = 0.0;
    for (const double v : x->values) acc += v;
    out->values[0] = acc;
    record(OpKind::kSum, {x}, out, [x, out] {
      if (!x->requires_grad) return;
      for (std::size_t i = 0; i < x->size(); ++i) x->grad[i] += out->grad[0];
    });
    return out;
  }

  // Mean cross-entropy of (N,C) logits against integer targets, computed via
  // log-sum-exp for stability.
  TensorPtr cross_entropy(const TensorPtr& logits,
                          const std::vector<int>& targets) {
    if (logits->shape.size() != 2 || logits->shape[0] != targets.size())
      throw ShapeError("cross_entropy",
                       "logits " + shape_str(logits->shape) + " vs " +
                           std::to_string(targets.size()) + " targets");
    const std::size_t n = logits->shape[0], c = logits->shape[1];
    for (const int t : targets)
      if (t < 0 || static_cast<std::size_t>(t) >= c)
        throw DataError("cross_entropy: target " + std::to_string(t) +
                        " out of range for " + std::to_string(c) + " classes");
    auto out = make_result({1}, {logits});
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double* row = logits->values.data() + i * c;
      double mx = row[0];
      for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
      double denom = 0.0;
      for (std::size_t j = 0; j < c; ++j) denom += std::exp(row[j] - mx);
      total += std::log(denom) + mx - row[targets[i]];
    }
    out->values[0] = total / static_cast<double>(n);
    record(OpKind::kCrossEntropy, {logits}, out, [logits, out, targets, n, c] {
      if (!logits->requires_grad) return;
      const double g = out->grad[0] / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) {
        const double* row = logits->values.data() + i * c;
        double* grow = logits->grad.data() + i * c;
        double mx = row[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (std::size_t j = 0; j < c; ++j) denom += std::exp(row[j] - mx);
        for (std::size_t j = 0; j < c; ++j) {
          const double p = std::exp(row[j] - mx) / denom;
          grow[j] += g * (p - (static_cast<std::size_t>(targets[i]) == j));
        }
      }
    });
    return out;
  }

  // Mean Shannon entropy (natural log) over all channel slices of a tensor
  // of probabilities. A single K-vector yields its own entropy.
  TensorPtr entropy(const TensorPtr& probs) {
    if (probs->shape.empty()) throw ShapeError("entropy", probs->shape, Shape{});
    auto out = make_result({1}, {probs});
    std::size_t slices = 0;
    double total = 0.0;
    for_each_channel_slice(*probs, [&](std::size_t base, std::size_t stride,
                                       std::size_t k) {
      ++slices;
      double h = 0.0;
      for (std::size_t c = 0; c < k; ++c) {
        const double p = probs->values[base + c * stride];
        if (p > 0.0) h -= p * std::log(p);
      }
      total += h;
    });
    out->values[0] = total / static_cast<double>(slices);
    record(OpKind::kEntropy, {probs}, out, [probs, out, slices] {
      if (!probs->requires_grad) return;
      const double g = out->grad[0] / static_cast<double>(slices);
      for_each_channel_slice(
          *probs, [&](std::size_t base, std::size_t stride, std::size_t k) {
            for (std::size_t c = 0; c < k; ++c) {
              const std::size_t i = base + c * stride;
              const double p = probs->values[i];
              if (p > 0.0) probs->grad[i] += -g * (std::log(p) + 1.0);
            }
          });
    });
    return out;
  }

  // Propagates d(loss)/d(tensor) to every requires_grad tensor reachable from
  // loss. Leaf grads accumulate across calls; tape-output grads are fresh.
  void backward(const TensorPtr& loss) {
    if (!loss->is_scalar())
      throw ShapeError("backward", "loss must be scalar, got " +
                                       shape_str(loss->shape));
    if (!outputs_.count(loss.get()))
      throw Error("backward: loss was not produced on this tape");
    for (auto& node : nodes_) node.output->zero_grad();
    loss->grad[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
      if (it->output->requires_grad) it->backward();
  }

  void clear() {
    nodes_.clear();
    outputs_.clear();
  }

  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }

 private:
  template <typename Fn>
  static void for_each_channel_slice(const Tensor& t, Fn&& fn) {
    if (t.shape.size() == 1) {
      fn(0, 1, t.shape[0]);
      return;
    }
    const std::size_t n = t.shape[0], k = t.shape[1];
    std::size_t inner = 1;
    for (std::size_t d = 2; d < t.shape.size(); ++d) inner *= t.shape[d];
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t s = 0; s < inner; ++s)
        fn(b * k * inner + s, inner, k);
  }

  TensorPtr make_result(Shape s, const std::vector<TensorPtr>& inputs) {
    bool rg = false;
    for (const auto& in : inputs) rg = rg || in->requires_grad;
    return make_tensor(std::move(s), rg);
  }

  void record(OpKind kind, std::vector<TensorPtr> inputs, TensorPtr output,
              std::function<void()> backward) {
    outputs_.insert(output.get());
    nodes_.push_back(
        Node{kind, std::move(inputs), std::move(output), std::move(backward)});
  }

  std::vector<Node> nodes_;
  std::unordered_set<const Tensor*> outputs_;
};

}  // namespace spa
