#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "dsmoe/error.hpp"

namespace dsmoe {

// Dense row-major matrix over float or double. All kernels in this header
// accumulate in a fixed order (ascending inner index, single accumulator)
// so results are reproducible run to run and bit-comparable against a
// naive reference loop.
template <std::floating_point T>
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(int r, int c, T fill = T(0)) : rows(r), cols(c), data(static_cast<size_t>(r) * c, fill) {
    require(r >= 0 && c >= 0, Status::invalid_argument, "matrix dims must be nonnegative");
  }

  T& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  const T& at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

  std::span<T> row(int r) { return {data.data() + static_cast<size_t>(r) * cols, static_cast<size_t>(cols)}; }
  std::span<const T> row(int r) const {
    return {data.data() + static_cast<size_t>(r) * cols, static_cast<size_t>(cols)};
  }

  size_t size() const { return data.size(); }

  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

  static std::string shape_str(int r, int c) { return std::to_string(r) + "x" + std::to_string(c); }
  std::string shape_str() const { return shape_str(rows, cols); }
};

template <std::floating_point T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  require(a.cols == b.rows, Status::shape_mismatch,
          "matmul: inner dimensions disagree, a is " + a.shape_str() + ", b is " + b.shape_str());
  Matrix<T> out(a.rows, b.cols);
  // i-k-j order: for each output element the partial products are added in
  // ascending k, matching the reference i-j-k loop bit for bit while keeping
  // the inner loop contiguous.
  for (int i = 0; i < a.rows; ++i) {
    const T* arow = a.data.data() + static_cast<size_t>(i) * a.cols;
    T* orow = out.data.data() + static_cast<size_t>(i) * out.cols;
    for (int k = 0; k < a.cols; ++k) {
      const T aik = arow[k];
      const T* brow = b.data.data() + static_cast<size_t>(k) * b.cols;
      for (int j = 0; j < b.cols; ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

// In-place softmax with max subtraction; preserves ordering of the inputs.
template <std::floating_point T>
void softmax_inplace(std::span<T> v) {
  require(!v.empty(), Status::invalid_argument, "softmax: empty input");
  T mx = v[0];
  for (T x : v) mx = std::max(mx, x);
  T sum = T(0);
  for (T& x : v) {
    x = std::exp(x - mx);
    sum += x;
  }
  for (T& x : v) x /= sum;
}

template <std::floating_point T>
std::vector<T> softmax(std::span<const T> logits) {
  std::vector<T> out(logits.begin(), logits.end());
  softmax_inplace(std::span<T>(out));
  return out;
}

template <std::floating_point T>
T swish(T x) {
  // x * sigmoid(x); exp(-x) may overflow to inf for very negative x,
  // in which case the quotient correctly underflows to +-0.
  return x / (T(1) + std::exp(-x));
}

// SwiGLU feed-forward: (Swish(x W1) ⊙ (x W3)) W2.
// `active_cols` restricts the computation to the first `active_cols` neurons
// (columns of W1/W3, rows of W2); pass w1.cols for the full expert.
template <std::floating_point T>
Matrix<T> swiglu_forward(const Matrix<T>& x, const Matrix<T>& w1, const Matrix<T>& w3,
                         const Matrix<T>& w2, int active_cols = -1) {
  require(w1.rows == x.cols && w3.rows == x.cols, Status::shape_mismatch,
          "swiglu: projection rows " + Matrix<T>::shape_str(w1.rows, w3.rows) +
              " do not match input width " + std::to_string(x.cols));
  require(w1.cols == w3.cols && w2.rows == w1.cols && w2.cols == x.cols, Status::shape_mismatch,
          "swiglu: inconsistent expert shapes w1 " + w1.shape_str() + ", w3 " + w3.shape_str() +
              ", w2 " + w2.shape_str());
  const int width = active_cols < 0 ? w1.cols : active_cols;
  require(width >= 0 && width <= w1.cols, Status::invalid_argument, "swiglu: bad active_cols");

  Matrix<T> out(x.rows, x.cols);
  std::vector<T> h(static_cast<size_t>(width));
  for (int t = 0; t < x.rows; ++t) {
    const T* xr = x.data.data() + static_cast<size_t>(t) * x.cols;
    for (int n = 0; n < width; ++n) {
      T g = T(0), u = T(0);
      for (int k = 0; k < x.cols; ++k) {
        g += xr[k] * w1.at(k, n);
        u += xr[k] * w3.at(k, n);
      }
      h[static_cast<size_t>(n)] = swish(g) * u;
    }
    T* orow = out.data.data() + static_cast<size_t>(t) * out.cols;
    for (int n = 0; n < width; ++n) {
      const T hn = h[static_cast<size_t>(n)];
      const T* w2row = w2.data.data() + static_cast<size_t>(n) * w2.cols;
      for (int j = 0; j < out.cols; ++j) orow[j] += hn * w2row[j];
    }
  }
  return out;
}

template <std::floating_point T>
bool bit_equal(const Matrix<T>& a, const Matrix<T>& b) {
  return a.rows == b.rows && a.cols == b.cols && a.data == b.data;
}

}  // namespace dsmoe
