#pragma once

#include <cstddef>
#include <vector>

#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>
#define UQ_HAVE_AVX2 1
#endif

// Inner matmul loops. Every kernel accumulates each output element in a
// fixed ascending-index order, so results are bit-stable from run to run
// and independent of where the kernel is called from.

namespace uq::kernels {

/// c[m x n] = a[m x k] * b[k x n]. Row major, c overwritten.
/// Per output element the sum runs over ascending k, matching a naive
/// triple loop exactly.
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t k, std::size_t n) {
#ifdef UQ_HAVE_AVX2
  for (std::size_t i = 0; i < m; ++i) {
    double* cr = c + i * n;
    const double* ar = a + i * k;
    std::size_t j = 0;
    for (; j + 16 <= n; j += 16) {
      __m256d c0 = _mm256_setzero_pd();
      __m256d c1 = _mm256_setzero_pd();
      __m256d c2 = _mm256_setzero_pd();
      __m256d c3 = _mm256_setzero_pd();
      for (std::size_t p = 0; p < k; ++p) {
        const __m256d av = _mm256_set1_pd(ar[p]);
        const double* br = b + p * n + j;
        c0 = _mm256_fmadd_pd(av, _mm256_loadu_pd(br), c0);
        c1 = _mm256_fmadd_pd(av, _mm256_loadu_pd(br + 4), c1);
        c2 = _mm256_fmadd_pd(av, _mm256_loadu_pd(br + 8), c2);
        c3 = _mm256_fmadd_pd(av, _mm256_loadu_pd(br + 12), c3);
      }
      _mm256_storeu_pd(cr + j, c0);
      _mm256_storeu_pd(cr + j + 4, c1);
      _mm256_storeu_pd(cr + j + 8, c2);
      _mm256_storeu_pd(cr + j + 12, c3);
    }
    for (; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ar[p] * b[p * n + j];
      cr[j] = s;
    }
  }
#else
  for (std::size_t i = 0; i < m; ++i) {
    double* cr = c + i * n;
    for (std::size_t j = 0; j < n; ++j) cr[j] = 0.0;
    const double* ar = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ar[p];
      const double* br = b + p * n;
      for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
#endif
}

/// c[m x n] += a[m x k] * b[k x n]. Per element the sum still runs over
/// ascending k; the AVX2 path only widens across output columns.
inline void gemm_nn_acc(const double* a, const double* b, double* c,
                        std::size_t m, std::size_t k, std::size_t n) {
#ifdef UQ_HAVE_AVX2
  for (std::size_t i = 0; i < m; ++i) {
    double* cr = c + i * n;
    const double* ar = a + i * k;
    std::size_t j = 0;
    for (; j + 16 <= n; j += 16) {
      __m256d c0 = _mm256_loadu_pd(cr + j);
      __m256d c1 = _mm256_loadu_pd(cr + j + 4);
      __m256d c2 = _mm256_loadu_pd(cr + j + 8);
      __m256d c3 = _mm256_loadu_pd(cr + j + 12);
      for (std::size_t p = 0; p < k; ++p) {
        const __m256d av = _mm256_set1_pd(ar[p]);
        const double* br = b + p * n + j;
        c0 = _mm256_fmadd_pd(av, _mm256_loadu_pd(br), c0);
        c1 = _mm256_fmadd_pd(av, _mm256_loadu_pd(br + 4), c1);
        c2 = _mm256_fmadd_pd(av, _mm256_loadu_pd(br + 8), c2);
        c3 = _mm256_fmadd_pd(av, _mm256_loadu_pd(br + 12), c3);
      }
      _mm256_storeu_pd(cr + j, c0);
      _mm256_storeu_pd(cr + j + 4, c1);
      _mm256_storeu_pd(cr + j + 8, c2);
      _mm256_storeu_pd(cr + j + 12, c3);
    }
    for (; j < n; ++j) {
      double s = cr[j];
      for (std::size_t p = 0; p < k; ++p) s += ar[p] * b[p * n + j];
      cr[j] = s;
    }
  }
#else
  for (std::size_t i = 0; i < m; ++i) {
    double* cr = c + i * n;
    const double* ar = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ar[p];
      const double* br = b + p * n;
      for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
#endif
}

/// c[m x n] = a[m x k] * b[n x k]^T, i.e. dot products of rows of a with
/// rows of b. This is the hot path for x * W^T projections.
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t k, std::size_t n) {
#ifdef UQ_HAVE_AVX2
  for (std::size_t i = 0; i < m; ++i) {
    const double* ar = a + i * k;
    double* cr = c + i * n;
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) {
      const double* b0 = b + j * k;
      const double* b1 = b0 + k;
      const double* b2 = b1 + k;
      const double* b3 = b2 + k;
      __m256d s0 = _mm256_setzero_pd();
      __m256d s1 = s0, s2 = s0, s3 = s0;
      std::size_t p = 0;
      for (; p + 4 <= k; p += 4) {
        __m256d av = _mm256_loadu_pd(ar + p);
        s0 = _mm256_fmadd_pd(av, _mm256_loadu_pd(b0 + p), s0);
        s1 = _mm256_fmadd_pd(av, _mm256_loadu_pd(b1 + p), s1);
        s2 = _mm256_fmadd_pd(av, _mm256_loadu_pd(b2 + p), s2);
        s3 = _mm256_fmadd_pd(av, _mm256_loadu_pd(b3 + p), s3);
      }
      __m256d h01 = _mm256_hadd_pd(s0, s1);
      __m256d h23 = _mm256_hadd_pd(s2, s3);
      __m256d sum = _mm256_add_pd(_mm256_permute2f128_pd(h01, h23, 0x20),
                                  _mm256_permute2f128_pd(h01, h23, 0x31));
      double out[4];
      _mm256_storeu_pd(out, sum);
      for (; p < k; ++p) {
        out[0] += ar[p] * b0[p];
        out[1] += ar[p] * b1[p];
        out[2] += ar[p] * b2[p];
        out[3] += ar[p] * b3[p];
      }
      cr[j] = out[0];
      cr[j + 1] = out[1];
      cr[j + 2] = out[2];
      cr[j + 3] = out[3];
    }
    for (; j < n; ++j) {
      const double* br = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ar[p] * br[p];
      cr[j] = s;
    }
  }
#else
  for (std::size_t i = 0; i < m; ++i) {
    const double* ar = a + i * k;
    double* cr = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* br = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ar[p] * br[p];
      cr[j] = s;
    }
  }
#endif
}

/// c[k x n] += a[m x k]^T * b[m x n], accumulated in ascending row order
/// per element. Used for weight gradients g^T paths. The AVX2 path copies
/// a^T into scratch once, then shares every b row across four output rows
/// so b is not re-streamed per row.
inline void gemm_tn_acc(const double* a, const double* b, double* c,
                        std::size_t m, std::size_t k, std::size_t n) {
#ifdef UQ_HAVE_AVX2
  thread_local std::vector<double> scratch;
  scratch.resize(k * m);
  for (std::size_t t = 0; t < m; ++t) {
    for (std::size_t i = 0; i < k; ++i) scratch[i * m + t] = a[t * k + i];
  }
  const double* at = scratch.data();

  std::size_t i = 0;
  for (; i + 4 <= k; i += 4) {
    const double* a0 = at + i * m;
    const double* a1 = a0 + m;
    const double* a2 = a1 + m;
    const double* a3 = a2 + m;
    double* c0r = c + i * n;
    double* c1r = c0r + n;
    double* c2r = c1r + n;
    double* c3r = c2r + n;
    std::size_t j = 0;
    for (; j + 8 <= n; j += 8) {
      __m256d s00 = _mm256_loadu_pd(c0r + j), s01 = _mm256_loadu_pd(c0r + j + 4);
      __m256d s10 = _mm256_loadu_pd(c1r + j), s11 = _mm256_loadu_pd(c1r + j + 4);
      __m256d s20 = _mm256_loadu_pd(c2r + j), s21 = _mm256_loadu_pd(c2r + j + 4);
      __m256d s30 = _mm256_loadu_pd(c3r + j), s31 = _mm256_loadu_pd(c3r + j + 4);
      for (std::size_t t = 0; t < m; ++t) {
        const double* br = b + t * n + j;
        const __m256d b0 = _mm256_loadu_pd(br);
        const __m256d b1 = _mm256_loadu_pd(br + 4);
        const __m256d v0 = _mm256_set1_pd(a0[t]);
        const __m256d v1 = _mm256_set1_pd(a1[t]);
        const __m256d v2 = _mm256_set1_pd(a2[t]);
        const __m256d v3 = _mm256_set1_pd(a3[t]);
        s00 = _mm256_fmadd_pd(v0, b0, s00);
        s01 = _mm256_fmadd_pd(v0, b1, s01);
        s10 = _mm256_fmadd_pd(v1, b0, s10);
        s11 = _mm256_fmadd_pd(v1, b1, s11);
        s20 = _mm256_fmadd_pd(v2, b0, s20);
        s21 = _mm256_fmadd_pd(v2, b1, s21);
        s30 = _mm256_fmadd_pd(v3, b0, s30);
        s31 = _mm256_fmadd_pd(v3, b1, s31);
      }
      _mm256_storeu_pd(c0r + j, s00);
      _mm256_storeu_pd(c0r + j + 4, s01);
      _mm256_storeu_pd(c1r + j, s10);
      _mm256_storeu_pd(c1r + j + 4, s11);
      _mm256_storeu_pd(c2r + j, s20);
      _mm256_storeu_pd(c2r + j + 4, s21);
      _mm256_storeu_pd(c3r + j, s30);
      _mm256_storeu_pd(c3r + j + 4, s31);
    }
    for (; j < n; ++j) {
      double e0 = c0r[j], e1 = c1r[j], e2 = c2r[j], e3 = c3r[j];
      for (std::size_t t = 0; t < m; ++t) {
        const double bv = b[t * n + j];
        e0 += a0[t] * bv;
        e1 += a1[t] * bv;
        e2 += a2[t] * bv;
        e3 += a3[t] * bv;
      }
      c0r[j] = e0;
      c1r[j] = e1;
      c2r[j] = e2;
      c3r[j] = e3;
    }
  }
  for (; i < k; ++i) {
    const double* ar = at + i * m;
    double* cr = c + i * n;
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) {
      __m256d s = _mm256_loadu_pd(cr + j);
      for (std::size_t t = 0; t < m; ++t) {
        s = _mm256_fmadd_pd(_mm256_set1_pd(ar[t]), _mm256_loadu_pd(b + t * n + j), s);
      }
      _mm256_storeu_pd(cr + j, s);
    }
    for (; j < n; ++j) {
      double e = cr[j];
      for (std::size_t t = 0; t < m; ++t) e += ar[t] * b[t * n + j];
      cr[j] = e;
    }
  }
#else
  for (std::size_t t = 0; t < m; ++t) {
    const double* ar = a + t * k;
    const double* br = b + t * n;
    for (std::size_t i = 0; i < k; ++i) {
      const double av = ar[i];
      double* cr = c + i * n;
      for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
#endif
}

/// y += alpha * x
inline void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace uq::kernels
