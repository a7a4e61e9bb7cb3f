// AVX2+FMA kernel variants. This translation unit is the only one compiled
// with -mavx2 -mfma; callers reach it through the dispatch table so the
// binary still runs (on the scalar table) on plain x86-64.
#if defined(__x86_64__) || defined(_M_X64)

#include <immintrin.h>

#include "capsbench/kernels.hpp"

namespace capsbench::kernels {

namespace {

inline float hsum8(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  __m128 sh = _mm_movehdup_ps(lo);
  __m128 sums = _mm_add_ps(lo, sh);
  sh = _mm_movehl_ps(sh, sums);
  sums = _mm_add_ss(sums, sh);
  return _mm_cvtss_f32(sums);
}

// R rows of C at once, k innermost with broadcast A. GetA(r, p) abstracts the
// A access pattern so the same body serves gemm_nn and gemm_tn.
template <int R, typename GetA>
void gemm_rows_bcast(GetA geta, const float* B, float* C, int i0, int n, int k, int acc) {
  float* c[R];
  for (int r = 0; r < R; ++r) c[r] = C + static_cast<size_t>(i0 + r) * n;

  int j = 0;
  for (; j + 16 <= n; j += 16) {
    __m256 acc0[R], acc1[R];
    for (int r = 0; r < R; ++r) {
      acc0[r] = acc ? _mm256_loadu_ps(c[r] + j) : _mm256_setzero_ps();
      acc1[r] = acc ? _mm256_loadu_ps(c[r] + j + 8) : _mm256_setzero_ps();
    }
    for (int p = 0; p < k; ++p) {
      const float* b = B + static_cast<size_t>(p) * n + j;
      const __m256 b0 = _mm256_loadu_ps(b);
      const __m256 b1 = _mm256_loadu_ps(b + 8);
      for (int r = 0; r < R; ++r) {
        const __m256 av = _mm256_set1_ps(geta(i0 + r, p));
        acc0[r] = _mm256_fmadd_ps(av, b0, acc0[r]);
        acc1[r] = _mm256_fmadd_ps(av, b1, acc1[r]);
      }
    }
    for (int r = 0; r < R; ++r) {
      _mm256_storeu_ps(c[r] + j, acc0[r]);
      _mm256_storeu_ps(c[r] + j + 8, acc1[r]);
    }
  }
  for (; j + 8 <= n; j += 8) {
    __m256 acc0[R];
    for (int r = 0; r < R; ++r)
      acc0[r] = acc ? _mm256_loadu_ps(c[r] + j) : _mm256_setzero_ps();
    for (int p = 0; p < k; ++p) {
      const __m256 b0 = _mm256_loadu_ps(B + static_cast<size_t>(p) * n + j);
      for (int r = 0; r < R; ++r)
        acc0[r] = _mm256_fmadd_ps(_mm256_set1_ps(geta(i0 + r, p)), b0, acc0[r]);
    }
    for (int r = 0; r < R; ++r) _mm256_storeu_ps(c[r] + j, acc0[r]);
  }
  for (; j < n; ++j) {
    for (int r = 0; r < R; ++r) {
      float s = acc ? c[r][j] : 0.f;
      for (int p = 0; p < k; ++p) s += geta(i0 + r, p) * B[static_cast<size_t>(p) * n + j];
      c[r][j] = s;
    }
  }
}

void a_gemm_nn(const float* A, const float* B, float* C, int m, int n, int k, int acc) {
  auto geta = [A, k](int i, int p) { return A[static_cast<size_t>(i) * k + p]; };
  int i = 0;
  for (; i + 4 <= m; i += 4) gemm_rows_bcast<4>(geta, B, C, i, n, k, acc);
  for (; i < m; ++i) gemm_rows_bcast<1>(geta, B, C, i, n, k, acc);
}

void a_gemm_tn(const float* A, const float* B, float* C, int m, int n, int k, int acc) {
  auto geta = [A, m](int i, int p) { return A[static_cast<size_t>(p) * m + i]; };
  int i = 0;
  for (; i + 4 <= m; i += 4) gemm_rows_bcast<4>(geta, B, C, i, n, k, acc);
  for (; i < m; ++i) gemm_rows_bcast<1>(geta, B, C, i, n, k, acc);
}

void a_gemm_nt(const float* A, const float* B, float* C, int m, int n, int k, int acc) {
  for (int i = 0; i < m; ++i) {
    const float* a = A + static_cast<size_t>(i) * k;
    float* c = C + static_cast<size_t>(i) * n;
    int j = 0;
    for (; j + 4 <= n; j += 4) {
      const float* b0 = B + static_cast<size_t>(j) * k;
      const float* b1 = b0 + k;
      const float* b2 = b1 + k;
      const float* b3 = b2 + k;
      __m256 s0 = _mm256_setzero_ps(), s1 = s0, s2 = s0, s3 = s0;
      int p = 0;
      for (; p + 8 <= k; p += 8) {
        const __m256 av = _mm256_loadu_ps(a + p);
        s0 = _mm256_fmadd_ps(av, _mm256_loadu_ps(b0 + p), s0);
        s1 = _mm256_fmadd_ps(av, _mm256_loadu_ps(b1 + p), s1);
        s2 = _mm256_fmadd_ps(av, _mm256_loadu_ps(b2 + p), s2);
        s3 = _mm256_fmadd_ps(av, _mm256_loadu_ps(b3 + p), s3);
      }
      float r0 = hsum8(s0), r1 = hsum8(s1), r2 = hsum8(s2), r3 = hsum8(s3);
      for (; p < k; ++p) {
        r0 += a[p] * b0[p];
        r1 += a[p] * b1[p];
        r2 += a[p] * b2[p];
        r3 += a[p] * b3[p];
      }
      if (acc) {
        c[j] += r0; c[j + 1] += r1; c[j + 2] += r2; c[j + 3] += r3;
      } else {
        c[j] = r0; c[j + 1] = r1; c[j + 2] = r2; c[j + 3] = r3;
      }
    }
    for (; j < n; ++j) {
      const float* b = B + static_cast<size_t>(j) * k;
      __m256 s = _mm256_setzero_ps();
      int p = 0;
      for (; p + 8 <= k; p += 8)
        s = _mm256_fmadd_ps(_mm256_loadu_ps(a + p), _mm256_loadu_ps(b + p), s);
      float r = hsum8(s);
      for (; p < k; ++p) r += a[p] * b[p];
      c[j] = acc ? c[j] + r : r;
    }
  }
}

void a_axpy(int n, float a, const float* x, float* y) {
  const __m256 av = _mm256_set1_ps(a);
  int i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_fmadd_ps(av, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  for (; i < n; ++i) y[i] += a * x[i];
}

void a_scale(int n, float a, const float* x, float* y) {
  const __m256 av = _mm256_set1_ps(a);
  int i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_mul_ps(av, _mm256_loadu_ps(x + i)));
  for (; i < n; ++i) y[i] = a * x[i];
}

void a_add(int n, const float* x, const float* y, float* z) {
  int i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(z + i, _mm256_add_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  for (; i < n; ++i) z[i] = x[i] + y[i];
}

void a_mul(int n, const float* x, const float* y, float* z) {
  int i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(z + i, _mm256_mul_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  for (; i < n; ++i) z[i] = x[i] * y[i];
}

float a_dot(int n, const float* x, const float* y) {
  __m256 s0 = _mm256_setzero_ps(), s1 = _mm256_setzero_ps();
  int i = 0;
  for (; i + 16 <= n; i += 16) {
    s0 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i), s0);
    s1 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i + 8), _mm256_loadu_ps(y + i + 8), s1);
  }
  for (; i + 8 <= n; i += 8)
    s0 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i), s0);
  float r = hsum8(_mm256_add_ps(s0, s1));
  for (; i < n; ++i) r += x[i] * y[i];
  return r;
}

float a_sum(int n, const float* x) {
  __m256 s0 = _mm256_setzero_ps(), s1 = _mm256_setzero_ps();
  int i = 0;
  for (; i + 16 <= n; i += 16) {
    s0 = _mm256_add_ps(s0, _mm256_loadu_ps(x + i));
    s1 = _mm256_add_ps(s1, _mm256_loadu_ps(x + i + 8));
  }
  for (; i + 8 <= n; i += 8) s0 = _mm256_add_ps(s0, _mm256_loadu_ps(x + i));
  float r = hsum8(_mm256_add_ps(s0, s1));
  for (; i < n; ++i) r += x[i];
  return r;
}

void a_relu_fwd(int n, const float* x, float* y) {
  const __m256 zero = _mm256_setzero_ps();
  int i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_max_ps(zero, _mm256_loadu_ps(x + i)));
  for (; i < n; ++i) y[i] = x[i] > 0.f ? x[i] : 0.f;
}

void a_relu_bwd(int n, const float* x, const float* dy, float* dx) {
  const __m256 zero = _mm256_setzero_ps();
  int i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 mask = _mm256_cmp_ps(_mm256_loadu_ps(x + i), zero, _CMP_GT_OQ);
    const __m256 g = _mm256_and_ps(mask, _mm256_loadu_ps(dy + i));
    _mm256_storeu_ps(dx + i, _mm256_add_ps(_mm256_loadu_ps(dx + i), g));
  }
  for (; i < n; ++i)
    if (x[i] > 0.f) dx[i] += dy[i];
}

}  // namespace

const Kernels& avx2_table() {
  static const Kernels table = {
      "avx2",    a_gemm_nn, a_gemm_nt, a_gemm_tn, a_axpy,     a_scale,
      a_add,     a_mul,     a_dot,     a_sum,     a_relu_fwd, a_relu_bwd,
  };
  return table;
}

}  // namespace capsbench::kernels

#endif  // x86-64
