#pragma once

#include <cblas.h>
#ifdef _OPENMP
#include <omp.h>
#endif

#include <cmath>
#include <cstdint>
#include <vector>

#include "dupkit/common.hpp"

namespace dupkit {

// Worker count for BLAS and the hand-written row-parallel kernels.
// Deterministic mode pins everything to one thread: OpenBLAS results are
// reproducible for a fixed thread count but not across different ones,
// and bit-identical artifacts across thread counts are part of the
// contract for deterministic runs.
inline void set_compute_threads(int n) {
  openblas_set_num_threads(n);
#ifdef _OPENMP
  omp_set_num_threads(n);
#endif
}

class ThreadGuard {
 public:
  explicit ThreadGuard(bool deterministic) {
    set_compute_threads(deterministic ? 1 : default_thread_count());
  }
  ~ThreadGuard() { set_compute_threads(default_thread_count()); }
  ThreadGuard(const ThreadGuard&) = delete;
  ThreadGuard& operator=(const ThreadGuard&) = delete;
};

enum class Trans { kN, kT };

inline void gemm(Trans ta, Trans tb, int m, int n, int k, float alpha,
                 const float* a, int lda, const float* b, int ldb, float beta,
                 float* c, int ldc) {
  cblas_sgemm(CblasRowMajor, ta == Trans::kN ? CblasNoTrans : CblasTrans,
              tb == Trans::kN ? CblasNoTrans : CblasTrans, m, n, k, alpha, a,
              lda, b, ldb, beta, c, ldc);
}

inline void gemm(Trans ta, Trans tb, int m, int n, int k, double alpha,
                 const double* a, int lda, const double* b, int ldb,
                 double beta, double* c, int ldc) {
  cblas_dgemm(CblasRowMajor, ta == Trans::kN ? CblasNoTrans : CblasTrans,
              tb == Trans::kN ? CblasNoTrans : CblasTrans, m, n, k, alpha, a,
              lda, b, ldb, beta, c, ldc);
}

// y[r, :] += bias for every row
template <class S>
void add_bias_rows(S* y, const S* bias, std::int64_t rows, std::int64_t cols) {
#pragma omp parallel for schedule(static)
  for (std::int64_t r = 0; r < rows; ++r) {
    S* row = y + r * cols;
    for (std::int64_t c = 0; c < cols; ++c) row[c] += bias[c];
  }
}

// dbias[c] += sum over rows of dy[r, c]; column-owned, fixed row order
template <class S>
void bias_grad(const S* dy, S* dbias, std::int64_t rows, std::int64_t cols) {
#pragma omp parallel for schedule(static)
  for (std::int64_t c = 0; c < cols; ++c) {
    S acc = 0;
    for (std::int64_t r = 0; r < rows; ++r) acc += dy[r * cols + c];
    dbias[c] += acc;
  }
}

template <class S>
void layernorm_forward(const S* x, const S* gain, const S* bias, S* y, S* mu,
                       S* rstd, std::int64_t rows, std::int64_t cols,
                       S eps = static_cast<S>(1e-5)) {
#pragma omp parallel for schedule(static)
  for (std::int64_t r = 0; r < rows; ++r) {
    const S* xr = x + r * cols;
    S* yr = y + r * cols;
    S m = 0;
    for (std::int64_t c = 0; c < cols; ++c) m += xr[c];
    m /= static_cast<S>(cols);
    S v = 0;
    for (std::int64_t c = 0; c < cols; ++c) {
      S d = xr[c] - m;
      v += d * d;
    }
    v /= static_cast<S>(cols);
    S rs = S(1) / std::sqrt(v + eps);
    mu[r] = m;
    rstd[r] = rs;
    for (std::int64_t c = 0; c < cols; ++c)
      yr[c] = (xr[c] - m) * rs * gain[c] + bias[c];
  }
}

// dx written (overwrites), dgain/dbias accumulated
template <class S>
void layernorm_backward(const S* dy, const S* x, const S* gain, const S* mu,
                        const S* rstd, S* dx, S* dgain, S* dbias,
                        std::int64_t rows, std::int64_t cols) {
#pragma omp parallel for schedule(static)
  for (std::int64_t r = 0; r < rows; ++r) {
    const S* dyr = dy + r * cols;
    const S* xr = x + r * cols;
    S* dxr = dx + r * cols;
    S m = mu[r], rs = rstd[r];
    S sum_gdy = 0, sum_gdyx = 0;
    for (std::int64_t c = 0; c < cols; ++c) {
      S xhat = (xr[c] - m) * rs;
      S g = gain[c] * dyr[c];
      sum_gdy += g;
      sum_gdyx += g * xhat;
    }
    sum_gdy /= static_cast<S>(cols);
    sum_gdyx /= static_cast<S>(cols);
    for (std::int64_t c = 0; c < cols; ++c) {
      S xhat = (xr[c] - m) * rs;
      dxr[c] = (gain[c] * dyr[c] - sum_gdy - xhat * sum_gdyx) * rs;
    }
  }
#pragma omp parallel for schedule(static)
  for (std::int64_t c = 0; c < cols; ++c) {
    S dg = 0, db = 0;
    for (std::int64_t r = 0; r < rows; ++r) {
      S xhat = (x[r * cols + c] - mu[r]) * rstd[r];
      dg += dy[r * cols + c] * xhat;
      db += dy[r * cols + c];
    }
    dgain[c] += dg;
    dbias[c] += db;
  }
}

template <class S>
void gelu_forward(const S* x, S* y, std::int64_t n) {
  const S k = static_cast<S>(0.7978845608028654);  // sqrt(2/pi)
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i) {
    S v = x[i];
    S t = std::tanh(k * (v + static_cast<S>(0.044715) * v * v * v));
    y[i] = static_cast<S>(0.5) * v * (S(1) + t);
  }
}

template <class S>
void gelu_backward(const S* dy, const S* x, S* dx, std::int64_t n) {
  const S k = static_cast<S>(0.7978845608028654);
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i) {
    S v = x[i];
    S u = k * (v + static_cast<S>(0.044715) * v * v * v);
    S t = std::tanh(u);
    S du = k * (S(1) + S(3) * static_cast<S>(0.044715) * v * v);
    dx[i] = dy[i] * (static_cast<S>(0.5) * (S(1) + t) +
                     static_cast<S>(0.5) * v * (S(1) - t * t) * du);
  }
}

}  // namespace dupkit
