/*
 * Copyright 2026 The rmgraph Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <cstddef>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "rmg/error.hpp"

namespace rmg {

/// Extents of an N x C x H x W tensor.
struct Shape4 {
  std::size_t n = 1;
  std::size_t c = 1;
  std::size_t h = 1;
  std::size_t w = 1;

  std::size_t numel() const { return n * c * h * w; }
  friend bool operator==(const Shape4&, const Shape4&) = default;

  std::string str() const {
    std::ostringstream os;
    os << "(" << n << ", " << c << ", " << h << ", " << w << ")";
    return os.str();
  }
};

/// Dense rank-4 array in N,C,H,W row-major order.
template <typename T = float>
class Tensor4 {
 public:
  using value_type = T;

  Tensor4() : Tensor4(Shape4{}) {}

  explicit Tensor4(Shape4 shape, T fill = T(0)) : shape_(shape) {
    check_dims(shape_);
    data_.assign(shape_.numel(), fill);
  }

  Tensor4(Shape4 shape, std::vector<T> data)
      : shape_(shape), data_(std::move(data)) {
    check_dims(shape_);
    if (data_.size() != shape_.numel()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_.str());
    }
  }

  const Shape4& shape() const { return shape_; }
  std::size_t n() const { return shape_.n; }
  std::size_t c() const { return shape_.c; }
  std::size_t h() const { return shape_.h; }
  std::size_t w() const { return shape_.w; }
  std::size_t size() const { return data_.size(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  std::size_t index(std::size_t n, std::size_t c, std::size_t h,
                    std::size_t w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[index(n, c, h, w)];
  }
  const T& operator()(std::size_t n, std::size_t c, std::size_t h,
                      std::size_t w) const {
    return data_[index(n, c, h, w)];
  }

  /// Contiguous H x W plane of one (n, c) pair.
  std::span<T> plane(std::size_t n, std::size_t c) {
    return std::span<T>(data_).subspan(index(n, c, 0, 0), shape_.h * shape_.w);
  }
  std::span<const T> plane(std::size_t n, std::size_t c) const {
    return std::span<const T>(data_).subspan(index(n, c, 0, 0),
                                             shape_.h * shape_.w);
  }

  template <typename U>
  Tensor4<U> cast() const {
    return Tensor4<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  friend bool operator==(const Tensor4&, const Tensor4&) = default;

 private:
  static void check_dims(const Shape4& s) {
    if (s.n == 0 || s.c == 0 || s.h == 0 || s.w == 0) {
      throw ShapeError("tensor dimensions must be >= 1, got " + s.str());
    }
  }

  Shape4 shape_;
  std::vector<T> data_;
};

/// Standard-normal tensor drawn from a seeded generator.
template <typename T = float>
Tensor4<T> random_normal(Shape4 shape, std::uint64_t seed, T stddev = T(1)) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  Tensor4<T> t(shape);
  for (auto& v : t.vec()) v = static_cast<T>(dist(gen)) * stddev;
  return t;
}

template <typename T = float>
Tensor4<T> random_uniform(Shape4 shape, std::uint64_t seed, T lo, T hi) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor4<T> t(shape);
  for (auto& v : t.vec()) v = static_cast<T>(dist(gen));
  return t;
}

/// Largest absolute elementwise difference; shapes must agree.
template <typename T>
double max_abs_diff(const Tensor4<T>& a, const Tensor4<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("cannot compare tensors of shape " + a.shape().str() +
                     " and " + b.shape().str());
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = static_cast<double>(a.vec()[i]) - static_cast<double>(b.vec()[i]);
    if (std::isnan(d)) return std::numeric_limits<double>::infinity();
    if (d < 0) d = -d;
    if (d > m) m = d;
  }
  return m;
}

}  // namespace rmg
