#pragma once

#include <cmath>
#include <functional>
#include <numbers>

#include "uamix/encoder.hpp"

namespace uamix {

/// Learning rate for a parameter group; only consulted for trainable groups.
using GroupRate = std::function<double(const Group&)>;

/// SGD with heavy-ball momentum: v = mu v + g; w -= lr v.
template <class S>
class SgdMomentum {
 public:
  SgdMomentum(const EncoderConfig& cfg, double momentum) : momentum_(momentum), velocity_(zero_params<S>(cfg)) {}

  void step(EncoderState<S>& st, const EncoderParams<S>& grads, const GroupRate& rate) {
    auto w = tensors(st.params);
    auto g = tensors(grads);
    auto v = tensors(velocity_);
    for (std::size_t t = 0; t < w.size(); ++t) {
      if (!st.is_trainable(w[t].group)) continue;
      const S lr = static_cast<S>(rate(w[t].group));
      const S mu = static_cast<S>(momentum_);
      S* pw = w[t].tensor->data();
      S* pv = v[t].tensor->data();
      const S* pg = g[t].tensor->data();
      for (std::size_t i = 0; i < w[t].tensor->size(); ++i) {
        pv[i] = mu * pv[i] + pg[i];
        pw[i] -= lr * pv[i];
      }
    }
  }

 private:
  double momentum_;
  EncoderParams<S> velocity_;
};

template <class S>
class Adam {
 public:
  explicit Adam(const EncoderConfig& cfg, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps), m_(zero_params<S>(cfg)), v_(zero_params<S>(cfg)) {}

  void step(EncoderState<S>& st, const EncoderParams<S>& grads, const GroupRate& rate) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    auto w = tensors(st.params);
    auto g = tensors(grads);
    auto m = tensors(m_);
    auto v = tensors(v_);
    for (std::size_t t = 0; t < w.size(); ++t) {
      if (!st.is_trainable(w[t].group)) continue;
      const double lr = rate(w[t].group);
      for (std::size_t i = 0; i < w[t].tensor->size(); ++i) {
        const double gi = static_cast<double>(g[t].tensor->data()[i]);
        S& mm = m[t].tensor->data()[i];
        S& vv = v[t].tensor->data()[i];
        mm = static_cast<S>(beta1_ * static_cast<double>(mm) + (1.0 - beta1_) * gi);
        vv = static_cast<S>(beta2_ * static_cast<double>(vv) + (1.0 - beta2_) * gi * gi);
        const double mhat = static_cast<double>(mm) / c1;
        const double vhat = static_cast<double>(vv) / c2;
        w[t].tensor->data()[i] -= static_cast<S>(lr * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

 private:
  double beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
  EncoderParams<S> m_, v_;
};

/// Linear warmup over the first `warmup` steps, then cosine decay to zero at
/// `total` steps. Returns the multiplier on the base rate for `step`.
inline double warmup_cosine(std::size_t step, std::size_t total, std::size_t warmup) {
  if (total == 0) return 1.0;
  if (step < warmup) return static_cast<double>(step + 1) / static_cast<double>(warmup);
  const std::size_t span = total > warmup ? total - warmup : 1;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(span);
  return 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
}

}  // namespace uamix
