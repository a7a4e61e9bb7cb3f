#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

#include "capsbench/parallel.hpp"
#include "capsbench/tensor.hpp"

namespace capsbench {

namespace detail {

template <typename T>
void im2col(const T* img, T* cols, int C, int H, int W, int kh, int kw, int stride,
            int pad, int OH, int OW) {
  const int P = OH * OW;
  for (int c = 0; c < C; ++c) {
    const T* src = img + static_cast<size_t>(c) * H * W;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        T* row = cols + (static_cast<size_t>(c) * kh * kw + static_cast<size_t>(ky) * kw + kx) * P;
        int idx = 0;
        for (int oy = 0; oy < OH; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) {
            for (int ox = 0; ox < OW; ++ox) row[idx++] = T(0);
            continue;
          }
          const T* line = src + static_cast<size_t>(iy) * W;
          for (int ox = 0; ox < OW; ++ox) {
            const int ix = ox * stride - pad + kx;
            row[idx++] = (ix >= 0 && ix < W) ? line[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_acc(const T* cols, T* img, int C, int H, int W, int kh, int kw, int stride,
                int pad, int OH, int OW) {
  const int P = OH * OW;
  for (int c = 0; c < C; ++c) {
    T* dst = img + static_cast<size_t>(c) * H * W;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const T* row =
            cols + (static_cast<size_t>(c) * kh * kw + static_cast<size_t>(ky) * kw + kx) * P;
        int idx = 0;
        for (int oy = 0; oy < OH; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) {
            idx += OW;
            continue;
          }
          T* line = dst + static_cast<size_t>(iy) * W;
          for (int ox = 0; ox < OW; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < W) line[ix] += row[idx];
            ++idx;
          }
        }
      }
    }
  }
}

}  // namespace detail

// 2-D convolution, no bias. x [B,C,H,W], w [O,C,kh,kw].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad) {
  if (x.rank() != 4) throw ConfigError("conv2d: input must be rank 4, got " + shape_str(x.shape()));
  if (w.rank() != 4) throw ConfigError("conv2d: weight must be rank 4, got " + shape_str(w.shape()));
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != C)
    throw ConfigError("conv2d: channel mismatch, input " + shape_str(x.shape()) + " weight " +
                      shape_str(w.shape()));
  if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
  const int OH = (H + 2 * pad - kh) / stride + 1;
  const int OW = (W + 2 * pad - kw) / stride + 1;
  if (H + 2 * pad < kh || W + 2 * pad < kw || OH < 1 || OW < 1)
    throw ConfigError("conv2d: kernel larger than padded input");

  const int K = C * kh * kw;
  const int P = OH * OW;
  auto cols = std::make_shared<std::vector<T>>(static_cast<size_t>(B) * K * P);
  const T* xd = x.data();
  parallel_for(0, B, [&](std::ptrdiff_t b) {
    detail::im2col(xd + static_cast<size_t>(b) * C * H * W,
                   cols->data() + static_cast<size_t>(b) * K * P, C, H, W, kh, kw, stride, pad,
                   OH, OW);
  });

  std::vector<T> out(static_cast<size_t>(B) * O * P);
  const T* wd = w.data();
  parallel_for(0, B, [&](std::ptrdiff_t b) {
    kernels::gemm_nn(wd, cols->data() + static_cast<size_t>(b) * K * P,
                     out.data() + static_cast<size_t>(b) * O * P, O, P, K, 0);
  });

  auto xn = x.node();
  auto wn = w.node();
  return make_op<T>(
      {B, O, OH, OW}, std::move(out), {x, w},
      [xn, wn, cols, B, C, H, W, O, kh, kw, stride, pad, OH, OW, K, P](TensorNode<T>& o) {
        const T* dy = o.grad.data();
        if (xn->needs_grad) {
          xn->ensure_grad();
          T* dx = xn->grad.data();
          const T* wd = wn->value.data();
          parallel_for(0, B, [&](std::ptrdiff_t b) {
            std::vector<T> dcols(static_cast<size_t>(K) * P);
            kernels::gemm_tn(wd, dy + static_cast<size_t>(b) * O * P, dcols.data(), K, P, O, 0);
            detail::col2im_acc(dcols.data(), dx + static_cast<size_t>(b) * C * H * W, C, H, W,
                               kh, kw, stride, pad, OH, OW);
          });
        }
        if (wn->needs_grad) {
          wn->ensure_grad();
          // Fixed chunking plus ordered combination keeps the weight-gradient
          // reduction independent of the thread count.
          constexpr int kChunks = 8;
          const int chunk = (B + kChunks - 1) / kChunks;
          const size_t wsize = wn->value.size();
          std::vector<std::vector<T>> partial(kChunks);
          parallel_for(0, kChunks, [&](std::ptrdiff_t ci) {
            const int b0 = static_cast<int>(ci) * chunk;
            const int b1 = std::min(B, b0 + chunk);
            if (b0 >= b1) return;
            partial[ci].assign(wsize, T(0));
            for (int b = b0; b < b1; ++b)
              kernels::gemm_nt(dy + static_cast<size_t>(b) * O * P,
                               cols->data() + static_cast<size_t>(b) * K * P,
                               partial[ci].data(), O, K, P, 1);
          });
          for (int ci = 0; ci < kChunks; ++ci)
            if (!partial[ci].empty())
              kernels::axpy(static_cast<int>(wsize), T(1), partial[ci].data(),
                            wn->grad.data());
        }
      });
}

// Batch normalization over NCHW with affine parameters. Training mode uses
// batch statistics (biased variance) and updates the running estimates in
// place; the running variance update uses the unbiased estimator.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      std::vector<T>& running_mean, std::vector<T>& running_var,
                      bool training, T momentum = T(0.1), T eps = T(1e-5)) {
  if (x.rank() != 4) throw ConfigError("batchnorm2d: input must be rank 4");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (gamma.numel() != static_cast<size_t>(C) || beta.numel() != static_cast<size_t>(C) ||
      running_mean.size() != static_cast<size_t>(C) || running_var.size() != static_cast<size_t>(C))
    throw ConfigError("batchnorm2d: parameter length must equal channel count");
  const int HW = H * W;
  const size_t csize = static_cast<size_t>(HW);
  const long N = static_cast<long>(B) * HW;

  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(C);
  std::vector<T> out(x.numel());
  std::vector<T> mean_c(C);
  const T* xd = x.data();
  const T* g = gamma.data();
  const T* be = beta.data();

  parallel_for(0, C, [&](std::ptrdiff_t c) {
    double mu, var;
    if (training) {
      double s = 0.0;
      for (int b = 0; b < B; ++b) {
        const T* chunk = xd + (static_cast<size_t>(b) * C + c) * csize;
        for (int i = 0; i < HW; ++i) s += static_cast<double>(chunk[i]);
      }
      mu = s / static_cast<double>(N);
      double sq = 0.0;
      for (int b = 0; b < B; ++b) {
        const T* chunk = xd + (static_cast<size_t>(b) * C + c) * csize;
        for (int i = 0; i < HW; ++i) {
          const double d = static_cast<double>(chunk[i]) - mu;
          sq += d * d;
        }
      }
      var = sq / static_cast<double>(N);
      running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * static_cast<T>(mu);
      const double unbiased = N > 1 ? var * static_cast<double>(N) / static_cast<double>(N - 1) : var;
      running_var[c] = (T(1) - momentum) * running_var[c] + momentum * static_cast<T>(unbiased);
    } else {
      mu = static_cast<double>(running_mean[c]);
      var = static_cast<double>(running_var[c]);
    }
    const T inv = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    (*inv_std)[c] = inv;
    mean_c[c] = static_cast<T>(mu);
    const T gc = g[c], bc = be[c], mc = static_cast<T>(mu);
    for (int b = 0; b < B; ++b) {
      const size_t off = (static_cast<size_t>(b) * C + c) * csize;
      for (int i = 0; i < HW; ++i) {
        const T xh = (xd[off + i] - mc) * inv;
        (*xhat)[off + i] = xh;
        out[off + i] = gc * xh + bc;
      }
    }
  });

  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  return make_op<T>(
      x.shape(), std::move(out), {x, gamma, beta},
      [xn, gn, bn, xhat, inv_std, training, B, C, HW, N](TensorNode<T>& o) {
        const T* dy = o.grad.data();
        const size_t csize = static_cast<size_t>(HW);
        if (gn->needs_grad) gn->ensure_grad();
        if (bn->needs_grad) bn->ensure_grad();
        if (xn->needs_grad) xn->ensure_grad();
        parallel_for(0, C, [&](std::ptrdiff_t c) {
          double sum_dy = 0.0, sum_dy_xh = 0.0;
          for (int b = 0; b < B; ++b) {
            const size_t off = (static_cast<size_t>(b) * C + c) * csize;
            for (int i = 0; i < HW; ++i) {
              sum_dy += static_cast<double>(dy[off + i]);
              sum_dy_xh += static_cast<double>(dy[off + i]) * static_cast<double>((*xhat)[off + i]);
            }
          }
          if (gn->needs_grad) gn->grad[c] += static_cast<T>(sum_dy_xh);
          if (bn->needs_grad) bn->grad[c] += static_cast<T>(sum_dy);
          if (!xn->needs_grad) return;
          const T gc = gn->value[c];
          const T inv = (*inv_std)[c];
          if (training) {
            const T k1 = gc * inv / static_cast<T>(N);
            const T sdy = static_cast<T>(sum_dy);
            const T sdyx = static_cast<T>(sum_dy_xh);
            for (int b = 0; b < B; ++b) {
              const size_t off = (static_cast<size_t>(b) * C + c) * csize;
              for (int i = 0; i < HW; ++i)
                xn->grad[off + i] +=
                    k1 * (static_cast<T>(N) * dy[off + i] - sdy - (*xhat)[off + i] * sdyx);
            }
          } else {
            const T k = gc * inv;
            for (int b = 0; b < B; ++b) {
              const size_t off = (static_cast<size_t>(b) * C + c) * csize;
              for (int i = 0; i < HW; ++i) xn->grad[off + i] += k * dy[off + i];
            }
          }
        });
      });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  kernels::relu_fwd(static_cast<int>(x.numel()), x.data(), out.data());
  auto xn = x.node();
  return make_op<T>(x.shape(), std::move(out), {x}, [xn](TensorNode<T>& o) {
    xn->ensure_grad();
    kernels::relu_bwd(static_cast<int>(o.value.size()), xn->value.data(), o.grad.data(),
                      xn->grad.data());
  });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  const T* xd = x.data();
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = T(1) / (T(1) + std::exp(-xd[i]));
  auto xn = x.node();
  return make_op<T>(x.shape(), std::move(out), {x}, [xn](TensorNode<T>& o) {
    xn->ensure_grad();
    for (size_t i = 0; i < o.value.size(); ++i) {
      const T y = o.value[i];
      xn->grad[i] += o.grad[i] * y * (T(1) - y);
    }
  });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank()) throw ConfigError("softmax: invalid axis");
  const int len = x.dim(axis);
  size_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= static_cast<size_t>(x.dim(d));
  for (int d = axis + 1; d < x.rank(); ++d) inner *= static_cast<size_t>(x.dim(d));

  std::vector<T> out(x.numel());
  const T* xd = x.data();
  for (size_t o = 0; o < outer; ++o) {
    for (size_t in = 0; in < inner; ++in) {
      const size_t base = o * static_cast<size_t>(len) * inner + in;
      T mx = xd[base];
      for (int j = 1; j < len; ++j) mx = std::max(mx, xd[base + static_cast<size_t>(j) * inner]);
      T denom = T(0);
      for (int j = 0; j < len; ++j) {
        const T e = std::exp(xd[base + static_cast<size_t>(j) * inner] - mx);
        out[base + static_cast<size_t>(j) * inner] = e;
        denom += e;
      }
      for (int j = 0; j < len; ++j) out[base + static_cast<size_t>(j) * inner] /= denom;
    }
  }

  auto xn = x.node();
  return make_op<T>(x.shape(), std::move(out), {x},
                    [xn, outer, inner, len](TensorNode<T>& o) {
                      xn->ensure_grad();
                      const T* y = o.value.data();
                      const T* dy = o.grad.data();
                      for (size_t ou = 0; ou < outer; ++ou) {
                        for (size_t in = 0; in < inner; ++in) {
                          const size_t base = ou * static_cast<size_t>(len) * inner + in;
                          T dot = T(0);
                          for (int j = 0; j < len; ++j) {
                            const size_t idx = base + static_cast<size_t>(j) * inner;
                            dot += y[idx] * dy[idx];
                          }
                          for (int j = 0; j < len; ++j) {
                            const size_t idx = base + static_cast<size_t>(j) * inner;
                            xn->grad[idx] += y[idx] * (dy[idx] - dot);
                          }
                        }
                      }
                    });
}

// Adaptive average pooling with floor-partition boundaries:
// cell i covers rows [i*H/out, (i+1)*H/out).
template <typename T>
Tensor<T> adaptive_avg_pool(const Tensor<T>& x, int oh, int ow) {
  if (x.rank() != 4) throw ConfigError("adaptive_avg_pool: input must be rank 4");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H < oh || W < ow)
    throw ConfigError("adaptive_avg_pool: input " + shape_str(x.shape()) +
                      " smaller than target " + std::to_string(oh) + "x" + std::to_string(ow));

  std::vector<T> out(static_cast<size_t>(B) * C * oh * ow);
  const T* xd = x.data();
  parallel_for(0, static_cast<std::ptrdiff_t>(B) * C, [&](std::ptrdiff_t bc) {
    const T* src = xd + static_cast<size_t>(bc) * H * W;
    T* dst = out.data() + static_cast<size_t>(bc) * oh * ow;
    for (int i = 0; i < oh; ++i) {
      const int y0 = i * H / oh, y1 = (i + 1) * H / oh;
      for (int j = 0; j < ow; ++j) {
        const int x0 = j * W / ow, x1 = (j + 1) * W / ow;
        T s = T(0);
        for (int y = y0; y < y1; ++y)
          for (int xx = x0; xx < x1; ++xx) s += src[y * W + xx];
        dst[i * ow + j] = s / static_cast<T>((y1 - y0) * (x1 - x0));
      }
    }
  });

  auto xn = x.node();
  return make_op<T>({B, C, oh, ow}, std::move(out), {x},
                    [xn, B, C, H, W, oh, ow](TensorNode<T>& o) {
                      xn->ensure_grad();
                      const T* dy = o.grad.data();
                      parallel_for(0, static_cast<std::ptrdiff_t>(B) * C, [&](std::ptrdiff_t bc) {
                        T* dx = xn->grad.data() + static_cast<size_t>(bc) * H * W;
                        const T* g = dy + static_cast<size_t>(bc) * oh * ow;
                        for (int i = 0; i < oh; ++i) {
                          const int y0 = i * H / oh, y1 = (i + 1) * H / oh;
                          for (int j = 0; j < ow; ++j) {
                            const int x0 = j * W / ow, x1 = (j + 1) * W / ow;
                            const T share = g[i * ow + j] / static_cast<T>((y1 - y0) * (x1 - x0));
                            for (int y = y0; y < y1; ++y)
                              for (int xx = x0; xx < x1; ++xx) dx[y * W + xx] += share;
                          }
                        }
                      });
                    });
}

// y = x * W^T + b. x [B,in], W [out,in], b [out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() != 2 || w.rank() != 2) throw ConfigError("linear: x and W must be rank 2");
  const int B = x.dim(0), in = x.dim(1), out_f = w.dim(0);
  if (w.dim(1) != in || b.numel() != static_cast<size_t>(out_f))
    throw ConfigError("linear: shape mismatch x " + shape_str(x.shape()) + " W " +
                      shape_str(w.shape()));

  std::vector<T> out(static_cast<size_t>(B) * out_f);
  kernels::gemm_nt(x.data(), w.data(), out.data(), B, out_f, in, 0);
  const T* bd = b.data();
  for (int i = 0; i < B; ++i)
    for (int j = 0; j < out_f; ++j) out[static_cast<size_t>(i) * out_f + j] += bd[j];

  auto xn = x.node();
  auto wn = w.node();
  auto bn = b.node();
  return make_op<T>({B, out_f}, std::move(out), {x, w, b},
                    [xn, wn, bn, B, in, out_f](TensorNode<T>& o) {
                      const T* dy = o.grad.data();
                      if (xn->needs_grad) {
                        xn->ensure_grad();
                        kernels::gemm_nn(dy, wn->value.data(), xn->grad.data(), B, in, out_f, 1);
                      }
                      if (wn->needs_grad) {
                        wn->ensure_grad();
                        kernels::gemm_tn(dy, xn->value.data(), wn->grad.data(), out_f, in, B, 1);
                      }
                      if (bn->needs_grad) {
                        bn->ensure_grad();
                        for (int i = 0; i < B; ++i)
                          for (int j = 0; j < out_f; ++j)
                            bn->grad[j] += dy[static_cast<size_t>(i) * out_f + j];
                      }
                    });
}

}  // namespace capsbench
