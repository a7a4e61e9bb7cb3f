#include "capsbench/kernels.hpp"

#include <cmath>

namespace capsbench::kernels {

namespace {

void s_gemm_nn(const float* A, const float* B, float* C, int m, int n, int k, int acc) {
  ref_gemm_nn(A, B, C, m, n, k, acc);
}
void s_gemm_nt(const float* A, const float* B, float* C, int m, int n, int k, int acc) {
  ref_gemm_nt(A, B, C, m, n, k, acc);
}
void s_gemm_tn(const float* A, const float* B, float* C, int m, int n, int k, int acc) {
  ref_gemm_tn(A, B, C, m, n, k, acc);
}

void s_axpy(int n, float a, const float* x, float* y) {
  for (int i = 0; i < n; ++i) y[i] += a * x[i];
}
void s_scale(int n, float a, const float* x, float* y) {
  for (int i = 0; i < n; ++i) y[i] = a * x[i];
}
void s_add(int n, const float* x, const float* y, float* z) {
  for (int i = 0; i < n; ++i) z[i] = x[i] + y[i];
}
void s_mul(int n, const float* x, const float* y, float* z) {
  for (int i = 0; i < n; ++i) z[i] = x[i] * y[i];
}
float s_dot(int n, const float* x, const float* y) {
  float s = 0.f;
  for (int i = 0; i < n; ++i) s += x[i] * y[i];
  return s;
}
float s_sum(int n, const float* x) {
  float s = 0.f;
  for (int i = 0; i < n; ++i) s += x[i];
  return s;
}
void s_relu_fwd(int n, const float* x, float* y) {
  for (int i = 0; i < n; ++i) y[i] = x[i] > 0.f ? x[i] : 0.f;
}
void s_relu_bwd(int n, const float* x, const float* dy, float* dx) {
  for (int i = 0; i < n; ++i)
    if (x[i] > 0.f) dx[i] += dy[i];
}

}  // namespace

const Kernels& scalar_table() {
  static const Kernels table = {
      "scalar",  s_gemm_nn, s_gemm_nt, s_gemm_tn, s_axpy,     s_scale,
      s_add,     s_mul,     s_dot,     s_sum,     s_relu_fwd, s_relu_bwd,
  };
  return table;
}

}  // namespace capsbench::kernels
