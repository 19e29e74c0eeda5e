#pragma once

// Reference implementations written independently of the library code.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace oracle {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;

inline double dot(const Vec& a, const Vec& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline Vec unit(Vec v) {
  const double n = std::sqrt(dot(v, v));
  for (auto& x : v) x /= n;
  return v;
}

inline Vec random_unit(std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  Vec v(d);
  for (auto& x : v) x = nd(rng);
  return unit(v);
}

/// Brute-force nearest entry by dot product; earliest entry wins ties.
inline Vec nearest(const Mat& queue, const Vec& z) {
  std::size_t best = 0;
  for (std::size_t e = 0; e < queue.size(); ++e)
    if (dot(queue[e], z) > dot(queue[best], z)) best = e;
  return queue[best];
}

/// One NNCLR term: -log( exp(n . z_pos[l] / tau) / sum_j exp(n . z_pos[j] / tau) ).
inline double nnclr_term(const Vec& n, const Mat& z_pos, std::size_t l, double tau) {
  double denom = 0;
  for (const auto& zj : z_pos) denom += std::exp(dot(n, zj) / tau);
  return -std::log(std::exp(dot(n, z_pos[l]) / tau) / denom);
}

/// Smoothed-label loss as a literal double sum of separate NNCLR terms.
inline double mixed_loss_literal(const Mat& z, const Mat& z_pos, const Mat& y, const Mat& queue, double tau) {
  double total = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const Vec n = nearest(queue, z[i]);
    for (std::size_t l = 0; l < z_pos.size(); ++l)
      if (y[i][l] != 0.0) total += y[i][l] * nnclr_term(n, z_pos, l, tau);
  }
  return total / static_cast<double>(z.size());
}

/// Central difference of `f` at `x[k]`.
template <class F>
double central_diff(F&& f, std::vector<double>& x, std::size_t k, double h) {
  const double keep = x[k];
  x[k] = keep + h;
  const double up = f();
  x[k] = keep - h;
  const double down = f();
  x[k] = keep;
  return (up - down) / (2 * h);
}

}  // namespace oracle
