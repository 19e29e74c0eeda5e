#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>
#include <span>
#include <vector>

#include "uamix/error.hpp"
#include "uamix/matrix.hpp"

namespace uamix {

/// Accepted deviation of ||v|| from 1 for inputs declared unit-norm.
inline constexpr double kUnitNormTolerance = 1e-4;

template <class S>
bool is_unit(std::span<const S> v, double tol = kUnitNormTolerance) {
  double acc = 0.0;
  for (S x : v) acc += static_cast<double>(x) * static_cast<double>(x);
  return std::abs(std::sqrt(acc) - 1.0) <= tol;
}

/// FIFO store of past positive-view embeddings used for nearest-neighbor
/// lookup. Entries are kept oldest-first and renormalized on insertion.
template <class S>
class SupportQueue {
 public:
  SupportQueue(std::size_t capacity, std::size_t dim) : capacity_(capacity), dim_(dim) {
    require(capacity >= 1, ErrorKind::Parameter, "queue capacity must be >= 1");
    require(dim >= 1, ErrorKind::Parameter, "queue dimension must be >= 1");
  }

  std::size_t capacity() const noexcept { return capacity_; }
  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  const std::deque<std::vector<S>>& entries() const noexcept { return entries_; }

  /// Appends every row of `batch_pos` in order, then evicts oldest entries.
  void push(const Matrix<S>& batch_pos) {
    require(batch_pos.cols() == dim_, ErrorKind::Shape, "queue push dimension mismatch");
    for (std::size_t r = 0; r < batch_pos.rows(); ++r)
      require(is_unit(batch_pos.row(r)), ErrorKind::Input, "queue entries must be unit-norm");
    for (std::size_t r = 0; r < batch_pos.rows(); ++r) entries_.push_back(renormalize(batch_pos.row(r)));
    while (entries_.size() > capacity_) entries_.pop_front();
  }

  void push(std::span<const S> v) {
    Matrix<S> m(1, v.size());
    std::copy(v.begin(), v.end(), m.data());
    push(m);
  }

  void clear() { entries_.clear(); }

 private:
  static std::vector<S> renormalize(std::span<const S> v) {
    double acc = 0.0;
    for (S x : v) acc += static_cast<double>(x) * static_cast<double>(x);
    const double n = std::sqrt(acc);
    std::vector<S> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<S>(static_cast<double>(v[i]) / n);
    return out;
  }

  std::size_t capacity_;
  std::size_t dim_;
  std::deque<std::vector<S>> entries_;
};

/// Mean of the k entries with the highest dot product to `z`, renormalized.
/// Ties go to the older entry. The result is a constant for differentiation.
template <class S>
std::vector<S> nn_lookup(const SupportQueue<S>& q, std::span<const S> z, std::size_t k) {
  require(!q.empty(), ErrorKind::State, "nearest-neighbor lookup on an empty queue");
  require(k >= 1 && k <= q.size(), ErrorKind::Bounds, "k must be in [1, |queue|]");
  require(z.size() == q.dim(), ErrorKind::Shape, "lookup dimension mismatch");
  const auto& entries = q.entries();
  std::vector<double> sims(entries.size());
  for (std::size_t e = 0; e < entries.size(); ++e) {
    double acc = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) acc += static_cast<double>(entries[e][i]) * static_cast<double>(z[i]);
    sims[e] = acc;
  }
  if (k == 1) {
    std::size_t best = 0;
    for (std::size_t e = 1; e < sims.size(); ++e)
      if (sims[e] > sims[best]) best = e;
    return entries[best];
  }
  std::vector<std::size_t> order(entries.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sims[a] > sims[b]; });
  std::vector<double> mean(q.dim(), 0.0);
  for (std::size_t r = 0; r < k; ++r)
    for (std::size_t i = 0; i < q.dim(); ++i) mean[i] += static_cast<double>(entries[order[r]][i]);
  double norm = 0.0;
  for (double v : mean) norm += v * v;
  norm = std::sqrt(norm);
  require(norm > 0.0, ErrorKind::Numerical, "top-k mean is the zero vector");
  std::vector<S> out(q.dim());
  for (std::size_t i = 0; i < q.dim(); ++i) out[i] = static_cast<S>(mean[i] / norm);
  return out;
}

/// Anchors `z` (mixed views), positives `z_pos` (originals) and the
/// row-stochastic smoothed label matrix `y`.
template <class S>
struct ContrastiveBatch {
  Matrix<S> z;
  Matrix<S> z_pos;
  Matrix<double> y;
  double tau = 0.15;
};

template <class S>
struct LossResult {
  double loss = 0.0;
  /// Zero: the anchors enter only through the stop-gradient lookup.
  Matrix<S> grad_z;
  Matrix<S> grad_z_pos;
  /// Looked-up neighbor of each anchor.
  Matrix<S> neighbors;
};

namespace detail {

template <class S>
void check_batch(const ContrastiveBatch<S>& cb) {
  const std::size_t n = cb.z.rows();
  require(cb.tau > 0.0, ErrorKind::Parameter, "temperature must be > 0");
  require(n >= 1 && cb.z_pos.rows() == n && cb.z.cols() == cb.z_pos.cols(), ErrorKind::Shape,
          "anchor/positive shape mismatch");
  require(cb.y.rows() == n && cb.y.cols() == n, ErrorKind::Shape, "label matrix must be |B|x|B|");
  for (std::size_t i = 0; i < n; ++i) {
    require(is_unit(cb.z.row(i)) && is_unit(cb.z_pos.row(i)), ErrorKind::Input, "embeddings must be unit-norm");
    double sum = 0.0;
    for (double v : cb.y.row(i)) {
      require(v >= 0.0, ErrorKind::Input, "labels must be non-negative");
      sum += v;
    }
    require(std::abs(sum - 1.0) <= 1e-9, ErrorKind::Input, "label rows must sum to 1");
  }
}

/// Mean over anchors of sum_l y[i,l] * (-log softmax_i[l]) with logits
/// NN(z_i) . z_l^+ / tau.
template <class S>
LossResult<S> smoothed_cross_entropy(const ContrastiveBatch<S>& cb, const SupportQueue<S>& q, std::size_t k) {
  const std::size_t n = cb.z.rows(), d = cb.z.cols();
  LossResult<S> out;
  out.grad_z = Matrix<S>(n, d);
  out.neighbors = Matrix<S>(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    const auto nb = nn_lookup(q, cb.z.row(i), k);
    std::copy(nb.begin(), nb.end(), out.neighbors.row(i).begin());
  }
  Matrix<double> grad(n, d);
  std::vector<double> logits(n), p(n);
  double total = 0.0;
  const double inv_tau = 1.0 / cb.tau;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto nb = out.neighbors.row(i);
    for (std::size_t l = 0; l < n; ++l) {
      double acc = 0.0;
      const auto zl = cb.z_pos.row(l);
      for (std::size_t c = 0; c < d; ++c) acc += static_cast<double>(nb[c]) * static_cast<double>(zl[c]);
      logits[l] = acc * inv_tau;
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (std::size_t l = 0; l < n; ++l) z += std::exp(logits[l] - mx);
    const double lse = mx + std::log(z);
    double li = 0.0;
    for (std::size_t l = 0; l < n; ++l) {
      const double yl = cb.y(i, l);
      if (yl != 0.0) li += yl * (lse - logits[l]);
      p[l] = std::exp(logits[l] - lse);
    }
    total += li;
    for (std::size_t l = 0; l < n; ++l) {
      const double g = (p[l] - cb.y(i, l)) * inv_tau * inv_n;
      for (std::size_t c = 0; c < d; ++c) grad(l, c) += g * static_cast<double>(nb[c]);
    }
  }
  out.loss = total * inv_n;
  out.grad_z_pos = grad.template cast<S>();
  return out;
}

}  // namespace detail

/// Label-smoothed NNCLR loss over a batch of mixed anchors.
template <class S>
LossResult<S> mixed_loss(const ContrastiveBatch<S>& cb, const SupportQueue<S>& q, std::size_t k) {
  detail::check_batch(cb);
  return detail::smoothed_cross_entropy(cb, q, k);
}

/// Plain NNCLR loss: the positive of anchor i is z_pos row i. `y` must be
/// empty or the identity.
template <class S>
LossResult<S> nnclr_loss(ContrastiveBatch<S> cb, const SupportQueue<S>& q, std::size_t k) {
  const std::size_t n = cb.z.rows();
  Matrix<double> eye(n, n);
  for (std::size_t i = 0; i < n; ++i) eye(i, i) = 1.0;
  require(cb.y.empty() || cb.y == eye, ErrorKind::Input, "nnclr_loss takes one-hot labels on the diagonal");
  cb.y = std::move(eye);
  detail::check_batch(cb);
  return detail::smoothed_cross_entropy(cb, q, k);
}

}  // namespace uamix
