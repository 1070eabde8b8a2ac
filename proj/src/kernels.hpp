#pragma once

// Dense kernels shared by the training and incremental forward passes.
//
// Every output element of matmul() is accumulated as
//   c = init; for k in [0, K): c = fma(a[i][k], b[k][j], c)
// in that exact order. A fused multiply-add rounds once, so the vector and
// scalar paths produce identical bits and an output row never depends on how
// many rows are evaluated together.

#include <algorithm>
#include <cmath>
#include <cstddef>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif
#if defined(__SSE__)
#include <xmmintrin.h>
#endif

namespace goldfish::kernels {

namespace detail {

template <typename T>
void matmul_scalar(const T* A, const T* B, T* C, int M, int K, int N, bool accumulate) {
  constexpr int CB = 64;
  T acc[CB];
  for (int j0 = 0; j0 < N; j0 += CB) {
    const int nb = std::min(CB, N - j0);
    for (int i = 0; i < M; ++i) {
      T* crow = C + static_cast<std::size_t>(i) * N + j0;
      for (int j = 0; j < nb; ++j) acc[j] = accumulate ? crow[j] : T(0);
      const T* arow = A + static_cast<std::size_t>(i) * K;
      for (int k = 0; k < K; ++k) {
        const T av = arow[k];
        const T* brow = B + static_cast<std::size_t>(k) * N + j0;
        for (int j = 0; j < nb; ++j) acc[j] = std::fma(av, brow[j], acc[j]);
      }
      for (int j = 0; j < nb; ++j) crow[j] = acc[j];
    }
  }
}

#if defined(__AVX512F__)
// R rows x up to 64 columns; `cols` < 64 uses masked loads and stores.
template <int R>
inline void tile_f32(const float* a, int lda, const float* b, int ldb, float* c, int ldc, int K, int cols,
                     bool accumulate) {
  __mmask16 m[4];
  for (int q = 0; q < 4; ++q) {
    const int w = std::clamp(cols - 16 * q, 0, 16);
    m[q] = static_cast<__mmask16>(w == 16 ? 0xFFFF : (1u << w) - 1u);
  }
  __m512 acc[R][4];
  for (int r = 0; r < R; ++r) {
    for (int q = 0; q < 4; ++q) {
      acc[r][q] = accumulate ? _mm512_maskz_loadu_ps(m[q], c + r * ldc + 16 * q) : _mm512_setzero_ps();
    }
  }
  for (int k = 0; k < K; ++k) {
    const float* brow = b + static_cast<std::size_t>(k) * ldb;
    const __m512 b0 = _mm512_maskz_loadu_ps(m[0], brow);
    const __m512 b1 = _mm512_maskz_loadu_ps(m[1], brow + 16);
    const __m512 b2 = _mm512_maskz_loadu_ps(m[2], brow + 32);
    const __m512 b3 = _mm512_maskz_loadu_ps(m[3], brow + 48);
    for (int r = 0; r < R; ++r) {
      const __m512 av = _mm512_set1_ps(a[static_cast<std::size_t>(r) * lda + k]);
      acc[r][0] = _mm512_fmadd_ps(av, b0, acc[r][0]);
      acc[r][1] = _mm512_fmadd_ps(av, b1, acc[r][1]);
      acc[r][2] = _mm512_fmadd_ps(av, b2, acc[r][2]);
      acc[r][3] = _mm512_fmadd_ps(av, b3, acc[r][3]);
    }
  }
  for (int r = 0; r < R; ++r) {
    for (int q = 0; q < 4; ++q) _mm512_mask_storeu_ps(c + r * ldc + 16 * q, m[q], acc[r][q]);
  }
}

inline void matmul_f32(const float* A, const float* B, float* C, int M, int K, int N, bool accumulate) {
  constexpr int RB = 6;
  for (int j0 = 0; j0 < N; j0 += 64) {
    const int nb = std::min(64, N - j0);
    int i = 0;
    for (; i + RB <= M; i += RB) {
      tile_f32<RB>(A + static_cast<std::size_t>(i) * K, K, B + j0, N, C + static_cast<std::size_t>(i) * N + j0, N, K,
                   nb, accumulate);
    }
    for (; i < M; ++i) {
      tile_f32<1>(A + static_cast<std::size_t>(i) * K, K, B + j0, N, C + static_cast<std::size_t>(i) * N + j0, N, K,
                  nb, accumulate);
    }
  }
}
#endif

}  // namespace detail

/// C[M,N] (+)= A[M,K] * B[K,N], all row-major and contiguous.
template <typename T>
void matmul(const T* A, const T* B, T* C, int M, int K, int N, bool accumulate) {
  detail::matmul_scalar(A, B, C, M, K, N, accumulate);
}

#if defined(__AVX512F__)
template <>
inline void matmul<float>(const float* A, const float* B, float* C, int M, int K, int N, bool accumulate) {
  detail::matmul_f32(A, B, C, M, K, N, accumulate);
}
#endif

namespace detail {

#if defined(__AVX512F__)
// exp() for float lanes: range reduction by ln2 (Cody-Waite split) and a
// degree-6 polynomial; about 2 ulp on [-87, 88].
inline __m512 exp_ps(__m512 x) {
  x = _mm512_min_ps(_mm512_max_ps(x, _mm512_set1_ps(-87.0f)), _mm512_set1_ps(88.0f));
  const __m512 n = _mm512_roundscale_ps(_mm512_mul_ps(x, _mm512_set1_ps(1.44269504088896341f)),
                                        _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
  __m512 r = _mm512_fnmadd_ps(n, _mm512_set1_ps(0.693359375f), x);
  r = _mm512_fnmadd_ps(n, _mm512_set1_ps(-2.12194440e-4f), r);
  __m512 p = _mm512_set1_ps(1.9875691500e-4f);
  p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(1.3981999507e-3f));
  p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(8.3334519073e-3f));
  p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(4.1665795894e-2f));
  p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(1.6666665459e-1f));
  p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(5.0000001201e-1f));
  p = _mm512_fmadd_ps(p, _mm512_mul_ps(r, r), _mm512_add_ps(r, _mm512_set1_ps(1.0f)));
  return _mm512_scalef_ps(p, n);
}

inline __mmask16 tail_mask(int remaining) {
  return static_cast<__mmask16>(remaining >= 16 ? 0xFFFF : (1u << remaining) - 1u);
}
#endif

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace detail

/// x[i] = exp(x[i])
template <typename T>
void exp_inplace(T* x, int n) {
  for (int i = 0; i < n; ++i) x[i] = std::exp(x[i]);
}

/// y = gelu(x), tanh approximation.
template <typename T>
void gelu_forward(const T* x, T* y, std::size_t n) {
  const T c = static_cast<T>(detail::kGeluC);
  const T a = static_cast<T>(detail::kGeluA);
  for (std::size_t i = 0; i < n; ++i) {
    const T v = x[i];
    y[i] = T(0.5) * v * (T(1) + std::tanh(c * (v + a * v * v * v)));
  }
}

/// g[i] *= gelu'(x[i])
template <typename T>
void gelu_backward(const T* x, T* g, std::size_t n) {
  const T c = static_cast<T>(detail::kGeluC);
  const T a = static_cast<T>(detail::kGeluA);
  for (std::size_t i = 0; i < n; ++i) {
    const T v = x[i];
    const T th = std::tanh(c * (v + a * v * v * v));
    const T dinner = c * (T(1) + T(3) * a * v * v);
    g[i] *= T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * dinner;
  }
}

#if defined(__AVX512F__)
template <>
inline void exp_inplace<float>(float* x, int n) {
  for (int i = 0; i < n; i += 16) {
    const __mmask16 m = detail::tail_mask(n - i);
    _mm512_mask_storeu_ps(x + i, m, detail::exp_ps(_mm512_maskz_loadu_ps(m, x + i)));
  }
}

namespace detail {
// tanh(u) = 1 - 2 / (exp(2u) + 1)
inline __m512 gelu_tanh_ps(__m512 v) {
  const __m512 u = _mm512_mul_ps(_mm512_set1_ps(static_cast<float>(kGeluC)),
                                 _mm512_fmadd_ps(_mm512_mul_ps(_mm512_set1_ps(static_cast<float>(kGeluA)), v),
                                                 _mm512_mul_ps(v, v), v));
  const __m512 e = exp_ps(_mm512_add_ps(u, u));
  return _mm512_sub_ps(_mm512_set1_ps(1.0f),
                       _mm512_div_ps(_mm512_set1_ps(2.0f), _mm512_add_ps(e, _mm512_set1_ps(1.0f))));
}
}  // namespace detail

template <>
inline void gelu_forward<float>(const float* x, float* y, std::size_t n) {
  const __m512 half = _mm512_set1_ps(0.5f), one = _mm512_set1_ps(1.0f);
  for (std::size_t i = 0; i < n; i += 16) {
    const __mmask16 m = detail::tail_mask(static_cast<int>(std::min<std::size_t>(n - i, 16)));
    const __m512 v = _mm512_maskz_loadu_ps(m, x + i);
    const __m512 th = detail::gelu_tanh_ps(v);
    _mm512_mask_storeu_ps(y + i, m, _mm512_mul_ps(_mm512_mul_ps(half, v), _mm512_add_ps(one, th)));
  }
}

template <>
inline void gelu_backward<float>(const float* x, float* g, std::size_t n) {
  const __m512 half = _mm512_set1_ps(0.5f), one = _mm512_set1_ps(1.0f);
  const __m512 c = _mm512_set1_ps(static_cast<float>(detail::kGeluC));
  const __m512 a3 = _mm512_set1_ps(static_cast<float>(3.0 * detail::kGeluA));
  for (std::size_t i = 0; i < n; i += 16) {
    const __mmask16 m = detail::tail_mask(static_cast<int>(std::min<std::size_t>(n - i, 16)));
    const __m512 v = _mm512_maskz_loadu_ps(m, x + i);
    const __m512 th = detail::gelu_tanh_ps(v);
    const __m512 dinner = _mm512_mul_ps(c, _mm512_fmadd_ps(_mm512_mul_ps(a3, v), v, one));
    const __m512 sech2 = _mm512_fnmadd_ps(th, th, one);
    const __m512 d = _mm512_fmadd_ps(_mm512_mul_ps(_mm512_mul_ps(half, v), sech2), dinner,
                                     _mm512_mul_ps(half, _mm512_add_ps(one, th)));
    _mm512_mask_storeu_ps(g + i, m, _mm512_mul_ps(_mm512_maskz_loadu_ps(m, g + i), d));
  }
}
#endif

/// out[cols, rows] = in[rows, cols]^T
template <typename T>
void transpose(const T* in, int rows, int cols, T* out) {
  constexpr int B = 32;
  for (int i0 = 0; i0 < rows; i0 += B) {
    for (int j0 = 0; j0 < cols; j0 += B) {
      const int i1 = std::min(rows, i0 + B);
      const int j1 = std::min(cols, j0 + B);
      for (int i = i0; i < i1; ++i) {
        for (int j = j0; j < j1; ++j) {
          out[static_cast<std::size_t>(j) * rows + i] = in[static_cast<std::size_t>(i) * cols + j];
        }
      }
    }
  }
}

/// Flush-to-zero and denormals-are-zero for the lifetime of the guard. Once a
/// model has memorized its data, gradients and Adam moments drift into the
/// subnormal range, where x86 arithmetic is many times slower.
class FlushDenormals {
 public:
#if defined(__SSE__)
  FlushDenormals() : saved_(_mm_getcsr()) { _mm_setcsr(saved_ | 0x8040u); }
  ~FlushDenormals() { _mm_setcsr(saved_); }

 private:
  unsigned saved_;
#endif
  FlushDenormals(const FlushDenormals&) = delete;
  FlushDenormals& operator=(const FlushDenormals&) = delete;
};

}  // namespace goldfish::kernels
