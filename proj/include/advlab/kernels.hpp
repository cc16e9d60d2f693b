#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "advlab/tensor.hpp"

// Low-level dense kernels. Every kernel fully writes its output (or
// explicitly accumulates when `acc` is set) so callers can hand over
// recycled buffers without clearing them first.

namespace advlab::kern {

inline constexpr double kRmsEps = 1e-6;

template <typename T>
void mm_nn(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& c,
           bool acc = false) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (!acc) std::fill(c.data.begin(), c.data.end(), T(0));
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a.data.data() + i * k;
    T* crow = c.data.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;  // one-hot inputs make this the common case
      const T* brow = b.data.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c = a * b^T
template <typename T>
void mm_nt(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& c,
           bool acc = false) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a.data.data() + i * k;
    T* crow = c.data.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b.data.data() + j * k;
      T s = 0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      crow[j] = acc ? crow[j] + s : s;
    }
  }
}

// c = a^T * b
template <typename T>
void mm_tn(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& c,
           bool acc = false) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (!acc) std::fill(c.data.begin(), c.data.end(), T(0));
  for (std::size_t p = 0; p < m; ++p) {
    const T* arow = a.data.data() + p * k;
    const T* brow = b.data.data() + p * n;
    for (std::size_t i = 0; i < k; ++i) {
      const T av = arow[i];
      if (av == T(0)) continue;
      T* crow = c.data.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void add(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& c) {
  for (std::size_t i = 0; i < c.data.size(); ++i)
    c.data[i] = a.data[i] + b.data[i];
}

template <typename T>
void axpy(T s, const Tensor<T>& x, Tensor<T>& y, bool acc) {
  if (acc) {
    for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] += s * x.data[i];
  } else {
    for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] = s * x.data[i];
  }
}

template <typename T>
void rmsnorm_fwd(const Tensor<T>& x, const Tensor<T>& gain, Tensor<T>& y) {
  const std::size_t n = x.rows(), d = x.cols();
  for (std::size_t i = 0; i < n; ++i) {
    const T* xr = x.data.data() + i * d;
    T* yr = y.data.data() + i * d;
    double q = 0;
    for (std::size_t j = 0; j < d; ++j) q += double(xr[j]) * double(xr[j]);
    const T inv = T(1.0 / std::sqrt(q / double(d) + kRmsEps));
    for (std::size_t j = 0; j < d; ++j) yr[j] = xr[j] * inv * gain.data[j];
  }
}

template <typename T>
void rmsnorm_bwd(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& g,
                 Tensor<T>& dx, Tensor<T>& dgain) {
  const std::size_t n = x.rows(), d = x.cols();
  std::fill(dgain.data.begin(), dgain.data.end(), T(0));
  for (std::size_t i = 0; i < n; ++i) {
    const T* xr = x.data.data() + i * d;
    const T* gr = g.data.data() + i * d;
    T* dxr = dx.data.data() + i * d;
    double q = 0;
    for (std::size_t j = 0; j < d; ++j) q += double(xr[j]) * double(xr[j]);
    const double s2 = q / double(d) + kRmsEps;
    const double inv = 1.0 / std::sqrt(s2);
    double t = 0;  // sum_j g_j * gain_j * x_j
    for (std::size_t j = 0; j < d; ++j)
      t += double(gr[j]) * double(gain.data[j]) * double(xr[j]);
    const double c = t * inv / (s2 * double(d));
    for (std::size_t j = 0; j < d; ++j) {
      dxr[j] = T(double(gr[j]) * double(gain.data[j]) * inv - double(xr[j]) * c);
      dgain.data[j] += T(double(gr[j]) * double(xr[j]) * inv);
    }
  }
}

// Row-wise softmax over the causal prefix j <= i; entries above the
// diagonal are written as exact zeros.
template <typename T>
void causal_softmax_fwd(const Tensor<T>& x, Tensor<T>& p) {
  const std::size_t n = x.rows();
  for (std::size_t i = 0; i < n; ++i) {
    const T* xr = x.data.data() + i * n;
    T* pr = p.data.data() + i * n;
    T mx = xr[0];
    for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, xr[j]);
    double z = 0;
    for (std::size_t j = 0; j <= i; ++j) {
      const double e = std::exp(double(xr[j] - mx));
      pr[j] = T(e);
      z += e;
    }
    const T invz = T(1.0 / z);
    for (std::size_t j = 0; j <= i; ++j) pr[j] *= invz;
    for (std::size_t j = i + 1; j < n; ++j) pr[j] = T(0);
  }
}

template <typename T>
void causal_softmax_bwd(const Tensor<T>& p, const Tensor<T>& g, Tensor<T>& dx) {
  const std::size_t n = p.rows();
  for (std::size_t i = 0; i < n; ++i) {
    const T* pr = p.data.data() + i * n;
    const T* gr = g.data.data() + i * n;
    T* dr = dx.data.data() + i * n;
    double dotv = 0;
    for (std::size_t j = 0; j <= i; ++j) dotv += double(gr[j]) * double(pr[j]);
    for (std::size_t j = 0; j <= i; ++j)
      dr[j] = T(double(pr[j]) * (double(gr[j]) - dotv));
    for (std::size_t j = i + 1; j < n; ++j) dr[j] = T(0);
  }
}

template <typename T>
void silu_mul_fwd(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& y) {
  for (std::size_t i = 0; i < y.data.size(); ++i) {
    const double av = double(a.data[i]);
    const double sig = 1.0 / (1.0 + std::exp(-av));
    y.data[i] = T(av * sig * double(b.data[i]));
  }
}

template <typename T>
void silu_mul_bwd(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& g,
                  Tensor<T>& da, Tensor<T>& db) {
  for (std::size_t i = 0; i < g.data.size(); ++i) {
    const double av = double(a.data[i]);
    const double sig = 1.0 / (1.0 + std::exp(-av));
    const double silu = av * sig;
    const double dsilu = sig * (1.0 + av * (1.0 - sig));
    da.data[i] = T(double(g.data[i]) * double(b.data[i]) * dsilu);
    db.data[i] = T(double(g.data[i]) * silu);
  }
}

template <typename T>
void take_rows_fwd(const Tensor<T>& x, std::size_t count, Tensor<T>& y) {
  std::copy(x.data.begin(), x.data.begin() + count * x.cols(), y.data.begin());
}

template <typename T>
void take_rows_bwd(const Tensor<T>& g, std::size_t xrows, Tensor<T>& dx) {
  std::fill(dx.data.begin(), dx.data.end(), T(0));
  std::copy(g.data.begin(), g.data.end(), dx.data.begin());
  (void)xrows;
}

template <typename T>
void take_cols_fwd(const Tensor<T>& x, std::size_t c0, std::size_t cc,
                   Tensor<T>& y) {
  const std::size_t n = x.rows(), d = x.cols();
  for (std::size_t i = 0; i < n; ++i) {
    const T* xr = x.data.data() + i * d + c0;
    T* yr = y.data.data() + i * cc;
    std::copy(xr, xr + cc, yr);
  }
}

template <typename T>
void take_cols_bwd(const Tensor<T>& g, std::size_t c0, std::size_t xcols,
                   Tensor<T>& dx) {
  const std::size_t n = g.rows(), cc = g.cols();
  std::fill(dx.data.begin(), dx.data.end(), T(0));
  for (std::size_t i = 0; i < n; ++i) {
    const T* gr = g.data.data() + i * cc;
    T* dr = dx.data.data() + i * xcols + c0;
    std::copy(gr, gr + cc, dr);
  }
}

template <typename T>
void concat_cols_fwd(std::span<const Tensor<T>* const> parts, Tensor<T>& y) {
  const std::size_t n = y.rows(), dtot = y.cols();
  std::size_t off = 0;
  for (const Tensor<T>* p : parts) {
    const std::size_t d = p->cols();
    for (std::size_t i = 0; i < n; ++i) {
      const T* src = p->data.data() + i * d;
      std::copy(src, src + d, y.data.data() + i * dtot + off);
    }
    off += d;
  }
}

}  // namespace advlab::kern
