#pragma once

#include <cmath>
#include <memory>
#include <vector>

#include "capsbench/ops.hpp"
#include "capsbench/tensor.hpp"

namespace capsbench {

// squash(v) = (|v| / (1 + |v|^2)) * v over the last axis. Output length is
// |v|^2/(1+|v|^2), always in [0,1); direction is preserved and zero maps to
// zero without any division.
template <typename T>
Tensor<T> squash(const Tensor<T>& x) {
  if (x.rank() < 1) throw ConfigError("squash: need at least one axis");
  const int d = x.dim(x.rank() - 1);
  const size_t rows = x.numel() / static_cast<size_t>(d);
  std::vector<T> out(x.numel());
  auto norms = std::make_shared<std::vector<T>>(rows);
  const T* xd = x.data();
  for (size_t r = 0; r < rows; ++r) {
    const T* v = xd + r * d;
    T sq = T(0);
    for (int i = 0; i < d; ++i) sq += v[i] * v[i];
    const T n = std::sqrt(sq);
    (*norms)[r] = n;
    const T f = n / (T(1) + sq);
    for (int i = 0; i < d; ++i) out[r * d + i] = f * v[i];
  }
  auto xn = x.node();
  return make_op<T>(x.shape(), std::move(out), {x}, [xn, norms, d](TensorNode<T>& o) {
    xn->ensure_grad();
    const size_t rows = o.value.size() / static_cast<size_t>(d);
    const T* g = o.grad.data();
    for (size_t r = 0; r < rows; ++r) {
      const T n = (*norms)[r];
      if (n == T(0)) continue;  // Jacobian vanishes at the origin
      const T* v = xn->value.data() + r * d;
      const T* gr = g + r * d;
      const T one_sq = T(1) + n * n;
      const T f = n / one_sq;
      T vg = T(0);
      for (int i = 0; i < d; ++i) vg += v[i] * gr[i];
      const T k = vg * (T(1) - n * n) / (n * one_sq * one_sq);
      T* dst = xn->grad.data() + r * d;
      for (int i = 0; i < d; ++i) dst[i] += f * gr[i] + k * v[i];
    }
  });
}

// L2 norm of each capsule along the last axis; [.., M, d] -> [.., M].
template <typename T>
Tensor<T> capsule_lengths(const Tensor<T>& x) {
  if (x.rank() < 2) throw ConfigError("capsule_lengths: need at least two axes");
  const int d = x.dim(x.rank() - 1);
  const size_t rows = x.numel() / static_cast<size_t>(d);
  std::vector<T> out(rows);
  const T* xd = x.data();
  for (size_t r = 0; r < rows; ++r) {
    T sq = T(0);
    for (int i = 0; i < d; ++i) sq += xd[r * d + i] * xd[r * d + i];
    out[r] = std::sqrt(sq);
  }
  Shape shape(x.shape().begin(), x.shape().end() - 1);
  auto xn = x.node();
  return make_op<T>(std::move(shape), std::move(out), {x}, [xn, d](TensorNode<T>& o) {
    xn->ensure_grad();
    for (size_t r = 0; r < o.value.size(); ++r) {
      const T n = o.value[r];
      if (n == T(0)) continue;
      const T k = o.grad[r] / n;
      for (int i = 0; i < d; ++i)
        xn->grad[r * d + i] += k * xn->value[r * d + i];
    }
  });
}

// Channel-major capsule reshape: [B, C, H, W] -> [B, N, d] with
// N = (C/d)*H*W. Capsule i = slot*(H*W) + y*W + x takes channels
// [slot*d, slot*d + d) at spatial site (y, x). ProbAM's invert-reshape and
// the checkpoint docs rely on exactly this ordering.
template <typename T>
Tensor<T> to_capsules(const Tensor<T>& x, int d) {
  if (x.rank() != 4) throw ConfigError("to_capsules: input must be rank 4");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (C % d != 0) throw ConfigError("to_capsules: channels not divisible by capsule dim");
  const int slots = C / d;
  const int HW = H * W;
  const int N = slots * HW;
  std::vector<T> out(x.numel());
  const T* xd = x.data();
  for (int b = 0; b < B; ++b) {
    const T* img = xd + static_cast<size_t>(b) * C * HW;
    T* dst = out.data() + static_cast<size_t>(b) * N * d;
    for (int s = 0; s < slots; ++s)
      for (int p = 0; p < HW; ++p)
        for (int e = 0; e < d; ++e)
          dst[(static_cast<size_t>(s) * HW + p) * d + e] = img[(static_cast<size_t>(s) * d + e) * HW + p];
  }
  auto xn = x.node();
  return make_op<T>({B, N, d}, std::move(out), {x}, [xn, B, slots, HW, d, N](TensorNode<T>& o) {
    xn->ensure_grad();
    for (int b = 0; b < B; ++b) {
      T* img = xn->grad.data() + static_cast<size_t>(b) * slots * d * HW;
      const T* g = o.grad.data() + static_cast<size_t>(b) * N * d;
      for (int s = 0; s < slots; ++s)
        for (int p = 0; p < HW; ++p)
          for (int e = 0; e < d; ++e)
            img[(static_cast<size_t>(s) * d + e) * HW + p] += g[(static_cast<size_t>(s) * HW + p) * d + e];
    }
  });
}

// Spatial site of capsule i under the to_capsules ordering.
inline void capsule_site(int i, int H, int W, int* slot, int* y, int* x) {
  const int HW = H * W;
  *slot = i / HW;
  const int p = i % HW;
  *y = p / W;
  *x = p % W;
}

namespace detail {
// W [M, d_in, d_out] -> Wt [d_in, M*d_out], the GEMM-friendly layout.
template <typename T>
std::vector<T> transpose_ps_weights(const T* w, int M, int din, int dout) {
  std::vector<T> wt(static_cast<size_t>(din) * M * dout);
  for (int j = 0; j < M; ++j)
    for (int d = 0; d < din; ++d)
      for (int o = 0; o < dout; ++o)
        wt[static_cast<size_t>(d) * M * dout + static_cast<size_t>(j) * dout + o] =
            w[(static_cast<size_t>(j) * din + d) * dout + o];
  return wt;
}
}  // namespace detail

// Shared-weight capsule transform: u_hat[b,i,j] = W_j u_i.
// U [B,N,d_in], W [M,d_in,d_out] -> [B,N,M,d_out]. Works for any N.
template <typename T>
Tensor<T> transform_ps(const Tensor<T>& u, const Tensor<T>& w) {
  if (u.rank() != 3 || w.rank() != 3)
    throw ConfigError("transform_ps: U must be [B,N,d_in], W must be [M,d_in,d_out]");
  const int B = u.dim(0), N = u.dim(1), din = u.dim(2);
  const int M = w.dim(0), dout = w.dim(2);
  if (w.dim(1) != din)
    throw ConfigError("transform_ps: d_in mismatch, U " + shape_str(u.shape()) + " W " +
                      shape_str(w.shape()));

  auto wt = std::make_shared<std::vector<T>>(detail::transpose_ps_weights(w.data(), M, din, dout));
  const int rows = B * N;
  const int cols = M * dout;
  std::vector<T> out(static_cast<size_t>(rows) * cols);
  kernels::gemm_nn(u.data(), wt->data(), out.data(), rows, cols, din, 0);

  auto un = u.node();
  auto wn = w.node();
  return make_op<T>({B, N, M, dout}, std::move(out), {u, w},
                    [un, wn, wt, rows, cols, din, M, dout](TensorNode<T>& o) {
                      const T* dy = o.grad.data();
                      if (un->needs_grad) {
                        un->ensure_grad();
                        kernels::gemm_nt(dy, wt->data(), un->grad.data(), rows, din, cols, 1);
                      }
                      if (wn->needs_grad) {
                        wn->ensure_grad();
                        std::vector<T> dwt(static_cast<size_t>(din) * cols);
                        kernels::gemm_tn(un->value.data(), dy, dwt.data(), din, cols, rows, 0);
                        for (int j = 0; j < M; ++j)
                          for (int d = 0; d < din; ++d)
                            for (int oo = 0; oo < dout; ++oo)
                              wn->grad[(static_cast<size_t>(j) * din + d) * dout + oo] +=
                                  dwt[static_cast<size_t>(d) * cols + static_cast<size_t>(j) * dout + oo];
                      }
                    });
}

// Fully connected capsule transform: u_hat[b,i,j] = W_ij u_i.
// U [B,N,d_in], W [M,N,d_in,d_out]. N is baked into W; a different run-time
// N is a contract violation (the FC layer's structural limitation).
template <typename T>
Tensor<T> transform_fc(const Tensor<T>& u, const Tensor<T>& w) {
  if (u.rank() != 3 || w.rank() != 4)
    throw ConfigError("transform_fc: U must be [B,N,d_in], W must be [M,N,d_in,d_out]");
  const int B = u.dim(0), N = u.dim(1), din = u.dim(2);
  const int M = w.dim(0), dout = w.dim(3);
  if (w.dim(1) != N)
    throw ConfigError("transform_fc: run-time capsule count " + std::to_string(N) +
                      " does not match layer's fixed N " + std::to_string(w.dim(1)));
  if (w.dim(2) != din) throw ConfigError("transform_fc: d_in mismatch");

  const int cols = M * dout;
  std::vector<T> out(static_cast<size_t>(B) * N * cols);
  const T* ud = u.data();
  // Per-i GEMM over the batch; U rows for fixed i are gathered to scratch.
  std::vector<T> ui(static_cast<size_t>(B) * din);
  std::vector<T> wti(static_cast<size_t>(din) * cols);
  std::vector<T> ci(static_cast<size_t>(B) * cols);
  for (int i = 0; i < N; ++i) {
    for (int b = 0; b < B; ++b)
      for (int d = 0; d < din; ++d)
        ui[static_cast<size_t>(b) * din + d] = ud[(static_cast<size_t>(b) * N + i) * din + d];
    for (int j = 0; j < M; ++j)
      for (int d = 0; d < din; ++d)
        for (int o = 0; o < dout; ++o)
          wti[static_cast<size_t>(d) * cols + static_cast<size_t>(j) * dout + o] =
              w.data()[((static_cast<size_t>(j) * N + i) * din + d) * dout + o];
    kernels::gemm_nn(ui.data(), wti.data(), ci.data(), B, cols, din, 0);
    for (int b = 0; b < B; ++b)
      for (int jo = 0; jo < cols; ++jo)
        out[(static_cast<size_t>(b) * N + i) * cols + jo] = ci[static_cast<size_t>(b) * cols + jo];
  }

  auto un = u.node();
  auto wn = w.node();
  return make_op<T>({B, N, M, dout}, std::move(out), {u, w},
                    [un, wn, B, N, din, M, dout, cols](TensorNode<T>& o) {
                      const T* dy = o.grad.data();
                      if (un->needs_grad) un->ensure_grad();
                      if (wn->needs_grad) wn->ensure_grad();
                      std::vector<T> dyi(static_cast<size_t>(B) * cols);
                      std::vector<T> ui(static_cast<size_t>(B) * din);
                      std::vector<T> wti(static_cast<size_t>(din) * cols);
                      std::vector<T> scratch(std::max(static_cast<size_t>(B) * din,
                                                      static_cast<size_t>(din) * cols));
                      for (int i = 0; i < N; ++i) {
                        for (int b = 0; b < B; ++b)
                          for (int jo = 0; jo < cols; ++jo)
                            dyi[static_cast<size_t>(b) * cols + jo] =
                                dy[(static_cast<size_t>(b) * N + i) * cols + jo];
                        if (un->needs_grad) {
                          for (int j = 0; j < M; ++j)
                            for (int d = 0; d < din; ++d)
                              for (int oo = 0; oo < dout; ++oo)
                                wti[static_cast<size_t>(d) * cols + static_cast<size_t>(j) * dout + oo] =
                                    wn->value[((static_cast<size_t>(j) * N + i) * din + d) * dout + oo];
                          kernels::gemm_nt(dyi.data(), wti.data(), scratch.data(), B, din, cols, 0);
                          for (int b = 0; b < B; ++b)
                            for (int d = 0; d < din; ++d)
                              un->grad[(static_cast<size_t>(b) * N + i) * din + d] +=
                                  scratch[static_cast<size_t>(b) * din + d];
                        }
                        if (wn->needs_grad) {
                          for (int b = 0; b < B; ++b)
                            for (int d = 0; d < din; ++d)
                              ui[static_cast<size_t>(b) * din + d] =
                                  un->value[(static_cast<size_t>(b) * N + i) * din + d];
                          kernels::gemm_tn(ui.data(), dyi.data(), scratch.data(), din, cols, B, 0);
                          for (int j = 0; j < M; ++j)
                            for (int d = 0; d < din; ++d)
                              for (int oo = 0; oo < dout; ++oo)
                                wn->grad[((static_cast<size_t>(j) * N + i) * din + d) * dout + oo] +=
                                    scratch[static_cast<size_t>(d) * cols + static_cast<size_t>(j) * dout + oo];
                        }
                      }
                    });
}

// v0[b,j] = (1/M) * sum_i u_hat[b,i,j]. The 1/M factor follows the routing
// initialization as published.
template <typename T>
Tensor<T> capsule_init(const Tensor<T>& uh) {
  if (uh.rank() != 4) throw ConfigError("capsule_init: expected [B,N,M,d]");
  const int B = uh.dim(0), N = uh.dim(1), M = uh.dim(2), d = uh.dim(3);
  const T scale = T(1) / static_cast<T>(M);
  std::vector<T> out(static_cast<size_t>(B) * M * d, T(0));
  const T* ud = uh.data();
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < M; ++j) {
        const T* src = ud + ((static_cast<size_t>(b) * N + i) * M + j) * d;
        T* dst = out.data() + (static_cast<size_t>(b) * M + j) * d;
        for (int e = 0; e < d; ++e) dst[e] += src[e];
      }
  for (auto& v : out) v *= scale;
  auto un = uh.node();
  return make_op<T>({B, M, d}, std::move(out), {uh}, [un, B, N, M, d, scale](TensorNode<T>& o) {
    un->ensure_grad();
    const T* g = o.grad.data();
    for (int b = 0; b < B; ++b)
      for (int i = 0; i < N; ++i)
        for (int j = 0; j < M; ++j) {
          T* dst = un->grad.data() + ((static_cast<size_t>(b) * N + i) * M + j) * d;
          const T* src = g + (static_cast<size_t>(b) * M + j) * d;
          for (int e = 0; e < d; ++e) dst[e] += scale * src[e];
        }
  });
}

// b[b,i,j] = (u_hat[b,i,j] . v[b,j]) / |v[b,j]|, with b = 0 where |v| = 0.
template <typename T>
Tensor<T> routing_similarity(const Tensor<T>& uh, const Tensor<T>& v) {
  const int B = uh.dim(0), N = uh.dim(1), M = uh.dim(2), d = uh.dim(3);
  if (v.rank() != 3 || v.dim(0) != B || v.dim(1) != M || v.dim(2) != d)
    throw ConfigError("routing_similarity: v must be [B,M,d]");
  auto norms = std::make_shared<std::vector<T>>(static_cast<size_t>(B) * M);
  const T* vd = v.data();
  for (size_t r = 0; r < norms->size(); ++r) {
    T sq = T(0);
    for (int e = 0; e < d; ++e) sq += vd[r * d + e] * vd[r * d + e];
    (*norms)[r] = std::sqrt(sq);
  }
  std::vector<T> out(static_cast<size_t>(B) * N * M);
  const T* ud = uh.data();
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < M; ++j) {
        const T n = (*norms)[static_cast<size_t>(b) * M + j];
        T dotv = T(0);
        if (n != T(0)) {
          const T* uu = ud + ((static_cast<size_t>(b) * N + i) * M + j) * d;
          const T* vv = vd + (static_cast<size_t>(b) * M + j) * d;
          for (int e = 0; e < d; ++e) dotv += uu[e] * vv[e];
          dotv /= n;
        }
        out[(static_cast<size_t>(b) * N + i) * M + j] = dotv;
      }

  auto un = uh.node();
  auto vn = v.node();
  return make_op<T>({B, N, M}, std::move(out), {uh, v},
                    [un, vn, norms, B, N, M, d](TensorNode<T>& o) {
                      const T* g = o.grad.data();
                      const T* bv = o.value.data();
                      if (un->needs_grad) un->ensure_grad();
                      if (vn->needs_grad) vn->ensure_grad();
                      for (int b = 0; b < B; ++b)
                        for (int j = 0; j < M; ++j) {
                          const size_t vr = static_cast<size_t>(b) * M + j;
                          const T n = (*norms)[vr];
                          if (n == T(0)) continue;
                          const T* vv = vn->value.data() + vr * d;
                          for (int i = 0; i < N; ++i) {
                            const size_t bi = (static_cast<size_t>(b) * N + i) * M + j;
                            const T gb = g[bi];
                            if (gb == T(0)) continue;
                            const size_t uoff = bi * static_cast<size_t>(d);
                            const T* uu = un->value.data() + uoff;
                            if (un->needs_grad) {
                              T* du = un->grad.data() + uoff;
                              for (int e = 0; e < d; ++e) du[e] += gb * vv[e] / n;
                            }
                            if (vn->needs_grad) {
                              T* dv = vn->grad.data() + vr * d;
                              const T bij = bv[bi];
                              for (int e = 0; e < d; ++e)
                                dv[e] += gb * (uu[e] / n - bij * vv[e] / (n * n));
                            }
                          }
                        }
                    });
}

// v[b,j] = sum_i c[b,i,j] * u_hat[b,i,j].
template <typename T>
Tensor<T> routing_aggregate(const Tensor<T>& c, const Tensor<T>& uh) {
  const int B = uh.dim(0), N = uh.dim(1), M = uh.dim(2), d = uh.dim(3);
  if (c.rank() != 3 || c.dim(0) != B || c.dim(1) != N || c.dim(2) != M)
    throw ConfigError("routing_aggregate: c must be [B,N,M]");
  std::vector<T> out(static_cast<size_t>(B) * M * d, T(0));
  const T* cd = c.data();
  const T* ud = uh.data();
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < M; ++j) {
        const T cij = cd[(static_cast<size_t>(b) * N + i) * M + j];
        const T* uu = ud + ((static_cast<size_t>(b) * N + i) * M + j) * d;
        T* dst = out.data() + (static_cast<size_t>(b) * M + j) * d;
        for (int e = 0; e < d; ++e) dst[e] += cij * uu[e];
      }
  auto cn = c.node();
  auto un = uh.node();
  return make_op<T>({B, M, d}, std::move(out), {c, uh},
                    [cn, un, B, N, M, d](TensorNode<T>& o) {
                      const T* g = o.grad.data();
                      if (cn->needs_grad) cn->ensure_grad();
                      if (un->needs_grad) un->ensure_grad();
                      for (int b = 0; b < B; ++b)
                        for (int i = 0; i < N; ++i)
                          for (int j = 0; j < M; ++j) {
                            const size_t ci = (static_cast<size_t>(b) * N + i) * M + j;
                            const T* gv = g + (static_cast<size_t>(b) * M + j) * d;
                            const T* uu = un->value.data() + ci * static_cast<size_t>(d);
                            if (cn->needs_grad) {
                              T s = T(0);
                              for (int e = 0; e < d; ++e) s += gv[e] * uu[e];
                              cn->grad[ci] += s;
                            }
                            if (un->needs_grad) {
                              const T cij = cn->value[ci];
                              T* du = un->grad.data() + ci * static_cast<size_t>(d);
                              for (int e = 0; e < d; ++e) du[e] += cij * gv[e];
                            }
                          }
                    });
}

// Output capsules plus the coupling coefficients from the final iteration.
template <typename T>
struct RoutingTrace {
  Tensor<T> V;  // [B, M, d_out], squashed
  Tensor<T> C;  // [B, N, M], rows over j sum to 1
};

// Modified k-means routing. Initialization averages the transformed capsules
// over M; every iteration recomputes the dot-product similarity from scratch
// (assignment, not accumulation), normalizes it over the high-level axis and
// re-aggregates. r = 0 returns the squashed initialization with uniform
// coupling. Gradients flow through all iterations.
template <typename T>
RoutingTrace<T> kmeans_route(const Tensor<T>& uh, int r) {
  if (uh.rank() != 4) throw ConfigError("kmeans_route: expected [B,N,M,d]");
  if (r < 0) throw ConfigError("kmeans_route: iterations must be >= 0");
  const int B = uh.dim(0), N = uh.dim(1), M = uh.dim(2);
  Tensor<T> v = capsule_init(uh);
  Tensor<T> c = Tensor<T>::full({B, N, M}, T(1) / static_cast<T>(M));
  for (int it = 0; it < r; ++it) {
    Tensor<T> b = routing_similarity(uh, v);
    c = softmax(b, 2);
    v = routing_aggregate(c, uh);
  }
  return {squash(v), c};
}

// PS capsule layer: shared-weight transform followed by routing.
template <typename T>
RoutingTrace<T> ps_capsule_layer(const Tensor<T>& u, const Tensor<T>& w, int r) {
  return kmeans_route(transform_ps(u, w), r);
}

// FC capsule layer: per-pair transform followed by routing.
template <typename T>
RoutingTrace<T> fc_capsule_layer(const Tensor<T>& u, const Tensor<T>& w, int r) {
  return kmeans_route(transform_fc(u, w), r);
}

}  // namespace capsbench
