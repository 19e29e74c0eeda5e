#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "uamix/error.hpp"

namespace uamix {

/// Dense row-major matrix. Vectors are 1×n matrices.
template <class S>
class Matrix {
 public:
  using value_type = S;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, S fill = S(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  S& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const S& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  S* data() noexcept { return data_.data(); }
  const S* data() const noexcept { return data_.data(); }
  std::vector<S>& storage() noexcept { return data_; }
  const std::vector<S>& storage() const noexcept { return data_; }

  std::span<S> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const S> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  void fill(S v) { std::fill(data_.begin(), data_.end(), v); }

  template <class T>
  Matrix<T> cast() const {
    Matrix<T> out(rows_, cols_);
    std::transform(data_.begin(), data_.end(), out.storage().begin(),
                   [](S v) { return static_cast<T>(v); });
    return out;
  }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<S> data_;
};

/// c = a · b
template <class S>
void matmul(const Matrix<S>& a, const Matrix<S>& b, Matrix<S>& c) {
  require(a.cols() == b.rows(), ErrorKind::Shape, "matmul inner dimension mismatch");
  c = Matrix<S>(a.rows(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    S* ci = c.data() + i * n;
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const S aik = a(i, k);
      const S* bk = b.data() + k * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aik * bk[j];
    }
  }
}

/// c += aᵀ · b
template <class S>
void matmul_at_b_acc(const Matrix<S>& a, const Matrix<S>& b, Matrix<S>& c) {
  const std::size_t n = b.cols();
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const S* br = b.data() + r * n;
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const S ari = a(r, i);
      S* ci = c.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += ari * br[j];
    }
  }
}

/// c = a · bᵀ
template <class S>
void matmul_a_bt(const Matrix<S>& a, const Matrix<S>& b, Matrix<S>& c) {
  c = Matrix<S>(a.rows(), b.rows());
  const std::size_t k = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const S* ai = a.data() + i * k;
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const S* bj = b.data() + j * k;
      S acc = 0;
      for (std::size_t t = 0; t < k; ++t) acc += ai[t] * bj[t];
      c(i, j) = acc;
    }
  }
}

/// Adds the 1×n row vector `bias` to every row of `m`.
template <class S>
void add_row_bias(Matrix<S>& m, const Matrix<S>& bias) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    for (std::size_t j = 0; j < m.cols(); ++j) r[j] += bias(0, j);
  }
}

/// bias_grad += column sums of `m`.
template <class S>
void acc_col_sums(const Matrix<S>& m, Matrix<S>& bias_grad) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    for (std::size_t j = 0; j < m.cols(); ++j) bias_grad(0, j) += r[j];
  }
}

template <class S>
void add_inplace(Matrix<S>& a, const Matrix<S>& b) {
  S* pa = a.data();
  const S* pb = b.data();
  for (std::size_t i = 0; i < a.size(); ++i) pa[i] += pb[i];
}

template <class S>
S dot(std::span<const S> a, std::span<const S> b) {
  S acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

template <class S>
S l2_norm(std::span<const S> v) {
  return std::sqrt(dot(v, v));
}

template <class S>
std::vector<S> normalized(std::span<const S> v) {
  const S n = l2_norm(v);
  require(n > S(0), ErrorKind::Numerical, "cannot normalize a zero vector");
  std::vector<S> out(v.begin(), v.end());
  for (auto& x : out) x /= n;
  return out;
}

}  // namespace uamix
