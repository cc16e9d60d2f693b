#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "advlab/common.hpp"

namespace advlab {

// Dense row-major tensor. In practice everything in this project is a
// scalar, a vector, or a 2-D matrix; shape is kept general for clarity.
template <typename T>
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<T> data;

  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> s) : shape(std::move(s)) {
    data.assign(numel(), T(0));
  }

  Tensor(std::vector<std::size_t> s, T fill) : shape(std::move(s)) {
    data.assign(numel(), fill);
  }

  Tensor(std::vector<std::size_t> s, std::vector<T> d)
      : shape(std::move(s)), data(std::move(d)) {}

  static Tensor scalar(T v) { return Tensor({1}, std::vector<T>{v}); }

  static Tensor matrix(std::size_t r, std::size_t c) { return Tensor({r, c}); }

  std::size_t numel() const {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return shape.empty() ? 0 : n;
  }

  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  T& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  std::span<T> row(std::size_t r) { return {data.data() + r * cols(), cols()}; }
  std::span<const T> row(std::size_t r) const {
    return {data.data() + r * cols(), cols()};
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (T v : data) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }
};

template <typename T>
inline double dot(std::span<const T> a, std::span<const T> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += double(a[i]) * double(b[i]);
  return s;
}

template <typename T>
inline double norm2(std::span<const T> a) {
  return std::sqrt(dot(a, a));
}

template <typename T>
inline double tensor_norm(const Tensor<T>& t) {
  return norm2(std::span<const T>(t.data.data(), t.data.size()));
}

// Cosine similarity over flattened tensors. Undefined (nullopt) when either
// norm falls below the shared denominator guard.
template <typename T>
inline std::optional<double> cosine_similarity(const Tensor<T>& a,
                                               const Tensor<T>& b) {
  if (!a.same_shape(b)) throw ConfigError("cosine_similarity: shape mismatch");
  std::span<const T> sa(a.data.data(), a.data.size());
  std::span<const T> sb(b.data.data(), b.data.size());
  const double na = norm2(sa);
  const double nb = norm2(sb);
  if (na < kNormEps || nb < kNormEps) return std::nullopt;
  return dot(sa, sb) / (na * nb);
}

}  // namespace advlab
