#pragma once

#include <cstddef>
#include <type_traits>

namespace capsbench::kernels {

// Flat-pointer float32 kernels behind a runtime-selected dispatch table.
// All GEMM variants are row-major and tightly packed (ld == row length).
// `acc` selects C = product (0) or C += product (1).
//
// Determinism contract: for a given table, every C element is produced by a
// fixed-order accumulation over k, so repeated calls are bit-identical. The
// scalar and SIMD tables may round differently from each other; equivalence
// tests bound that difference against a double-precision reference.
struct Kernels {
  const char* name;

  // C[m x n] = A[m x k] * B[k x n]
  void (*gemm_nn)(const float* A, const float* B, float* C, int m, int n, int k, int acc);
  // C[m x n] = A[m x k] * B^T, B stored [n x k]
  void (*gemm_nt)(const float* A, const float* B, float* C, int m, int n, int k, int acc);
  // C[m x n] = A^T * B, A stored [k x m], B stored [k x n]
  void (*gemm_tn)(const float* A, const float* B, float* C, int m, int n, int k, int acc);

  void (*axpy)(int n, float a, const float* x, float* y);           // y += a*x
  void (*scale)(int n, float a, const float* x, float* y);          // y = a*x
  void (*add)(int n, const float* x, const float* y, float* z);     // z = x+y
  void (*mul)(int n, const float* x, const float* y, float* z);     // z = x.*y
  float (*dot)(int n, const float* x, const float* y);
  float (*sum)(int n, const float* x);
  void (*relu_fwd)(int n, const float* x, float* y);                // y = max(0,x)
  void (*relu_bwd)(int n, const float* x, const float* dy, float* dx);  // dx += dy.*(x>0)
};

const Kernels& scalar_table();
bool avx2_available();
#if defined(__x86_64__) || defined(_M_X64)
const Kernels& avx2_table();
#endif

// Table picked once at startup: best supported variant, overridable with
// CAPSBENCH_KERNELS=scalar|avx2 for debugging and equivalence testing.
const Kernels& active();

// Reference loops for any scalar type; the double instantiation is the
// gradient-check path and the oracle the float tables are tested against.
template <typename T>
void ref_gemm_nn(const T* A, const T* B, T* C, int m, int n, int k, int acc) {
  for (int i = 0; i < m; ++i) {
    T* c = C + static_cast<size_t>(i) * n;
    if (!acc)
      for (int j = 0; j < n; ++j) c[j] = T(0);
    const T* a = A + static_cast<size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const T av = a[p];
      const T* b = B + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

template <typename T>
void ref_gemm_nt(const T* A, const T* B, T* C, int m, int n, int k, int acc) {
  for (int i = 0; i < m; ++i) {
    const T* a = A + static_cast<size_t>(i) * k;
    T* c = C + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* b = B + static_cast<size_t>(j) * k;
      T s = T(0);
      for (int p = 0; p < k; ++p) s += a[p] * b[p];
      c[j] = acc ? c[j] + s : s;
    }
  }
}

template <typename T>
void ref_gemm_tn(const T* A, const T* B, T* C, int m, int n, int k, int acc) {
  for (int i = 0; i < m; ++i) {
    T* c = C + static_cast<size_t>(i) * n;
    if (!acc)
      for (int j = 0; j < n; ++j) c[j] = T(0);
    for (int p = 0; p < k; ++p) {
      const T av = A[static_cast<size_t>(p) * m + i];
      const T* b = B + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// Type-dispatched entry points: float goes through the runtime table, every
// other scalar type (double for gradient checking) uses the reference loops.
template <typename T>
inline void gemm_nn(const T* A, const T* B, T* C, int m, int n, int k, int acc) {
  if constexpr (std::is_same_v<T, float>) active().gemm_nn(A, B, C, m, n, k, acc);
  else ref_gemm_nn(A, B, C, m, n, k, acc);
}
template <typename T>
inline void gemm_nt(const T* A, const T* B, T* C, int m, int n, int k, int acc) {
  if constexpr (std::is_same_v<T, float>) active().gemm_nt(A, B, C, m, n, k, acc);
  else ref_gemm_nt(A, B, C, m, n, k, acc);
}
template <typename T>
inline void gemm_tn(const T* A, const T* B, T* C, int m, int n, int k, int acc) {
  if constexpr (std::is_same_v<T, float>) active().gemm_tn(A, B, C, m, n, k, acc);
  else ref_gemm_tn(A, B, C, m, n, k, acc);
}
template <typename T>
inline void axpy(int n, T a, const T* x, T* y) {
  if constexpr (std::is_same_v<T, float>) active().axpy(n, a, x, y);
  else
    for (int i = 0; i < n; ++i) y[i] += a * x[i];
}
template <typename T>
inline void scale(int n, T a, const T* x, T* y) {
  if constexpr (std::is_same_v<T, float>) active().scale(n, a, x, y);
  else
    for (int i = 0; i < n; ++i) y[i] = a * x[i];
}
template <typename T>
inline void add(int n, const T* x, const T* y, T* z) {
  if constexpr (std::is_same_v<T, float>) active().add(n, x, y, z);
  else
    for (int i = 0; i < n; ++i) z[i] = x[i] + y[i];
}
template <typename T>
inline void mul(int n, const T* x, const T* y, T* z) {
  if constexpr (std::is_same_v<T, float>) active().mul(n, x, y, z);
  else
    for (int i = 0; i < n; ++i) z[i] = x[i] * y[i];
}
template <typename T>
inline T dot(int n, const T* x, const T* y) {
  if constexpr (std::is_same_v<T, float>) return active().dot(n, x, y);
  T s = T(0);
  for (int i = 0; i < n; ++i) s += x[i] * y[i];
  return s;
}
template <typename T>
inline T sum(int n, const T* x) {
  if constexpr (std::is_same_v<T, float>) return active().sum(n, x);
  T s = T(0);
  for (int i = 0; i < n; ++i) s += x[i];
  return s;
}
template <typename T>
inline void relu_fwd(int n, const T* x, T* y) {
  if constexpr (std::is_same_v<T, float>) active().relu_fwd(n, x, y);
  else
    for (int i = 0; i < n; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
}
template <typename T>
inline void relu_bwd(int n, const T* x, const T* dy, T* dx) {
  if constexpr (std::is_same_v<T, float>) active().relu_bwd(n, x, dy, dx);
  else
    for (int i = 0; i < n; ++i)
      if (x[i] > T(0)) dx[i] += dy[i];
}

}  // namespace capsbench::kernels
