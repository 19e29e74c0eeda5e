#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "uamix/dataset.hpp"
#include "uamix/error.hpp"
#include "uamix/random.hpp"

namespace uamix {

enum class MixMode { TCutMix, TFCutMix, MixUp, None };

inline std::string to_string(MixMode m) {
  switch (m) {
    case MixMode::TCutMix: return "t_cutmix";
    case MixMode::TFCutMix: return "tf_cutmix";
    case MixMode::MixUp: return "mixup";
    case MixMode::None: return "none";
  }
  return "?";
}

inline MixMode parse_mix_mode(const std::string& s) {
  if (s == "t_cutmix") return MixMode::TCutMix;
  if (s == "tf_cutmix") return MixMode::TFCutMix;
  if (s == "mixup") return MixMode::MixUp;
  if (s == "none") return MixMode::None;
  fail(ErrorKind::Config, "unknown mix mode '" + s + "'");
}

struct MixParams {
  double alpha = 1.0;
  MixMode mode = MixMode::TCutMix;
};

/// Region replaced by the partner sample. `w_t`/`w_f` are the sampled
/// lengths; the realized region is clamped at the right/bottom boundary.
struct BoundingBox {
  std::size_t s_t = 0;
  std::size_t w_t = 0;
  std::size_t s_f = 0;
  std::size_t w_f = 0;

  std::size_t realized_w_t(std::size_t t_len) const { return std::min(s_t + w_t, t_len) - std::min(s_t, t_len); }
  std::size_t realized_w_f(std::size_t f_len) const { return std::min(s_f + w_f, f_len) - std::min(s_f, f_len); }
  bool contains(std::size_t t, std::size_t f) const { return t >= s_t && t < s_t + w_t && f >= s_f && f < s_f + w_f; }
};

struct MixedPair {
  Fbank m;
  std::vector<double> y;  // smoothed virtual label over the batch
  std::size_t i = 0;
  std::size_t j = 0;
  double lam_eff = 1.0;
  BoundingBox box;
};

inline double sample_lambda(double alpha, Rng& rng) {
  require(alpha > 0.0, ErrorKind::Parameter, "alpha must be > 0");
  return beta(rng, alpha, alpha);
}

/// Box length for a time (or frequency) extent: round(len * sqrt(1 - lambda)).
inline std::size_t box_length(std::size_t len, double lambda) {
  return static_cast<std::size_t>(std::lround(static_cast<double>(len) * std::sqrt(std::max(0.0, 1.0 - lambda))));
}

/// Full-frequency time box starting at `s_t`.
inline BoundingBox make_bbox_t(std::size_t t_len, std::size_t f_len, double lambda, std::size_t s_t) {
  require(t_len >= 1 && f_len >= 1, ErrorKind::Shape, "bbox needs T, F >= 1");
  require(lambda >= 0.0 && lambda <= 1.0, ErrorKind::Parameter, "lambda must be in [0, 1]");
  require(s_t < t_len, ErrorKind::Bounds, "s_t must be < T");
  return {s_t, box_length(t_len, lambda), 0, f_len};
}

inline BoundingBox sample_bbox_t(std::size_t t_len, std::size_t f_len, double lambda, Rng& rng) {
  require(t_len >= 1, ErrorKind::Shape, "bbox needs T >= 1");
  return make_bbox_t(t_len, f_len, lambda, uniform_index(rng, t_len));
}

inline BoundingBox sample_bbox_tf(std::size_t t_len, std::size_t f_len, double lambda, Rng& rng) {
  BoundingBox bb = sample_bbox_t(t_len, f_len, lambda, rng);
  bb.w_f = box_length(f_len, lambda);
  bb.s_f = uniform_index(rng, f_len);
  return bb;
}

/// Binary T×F mask: 0 inside the realized box, 1 elsewhere.
inline Matrix<float> make_mask(const BoundingBox& bb, std::size_t t_len, std::size_t f_len) {
  Matrix<float> mask(t_len, f_len, 1.0f);
  const std::size_t t_end = bb.s_t + bb.realized_w_t(t_len);
  const std::size_t f_end = bb.s_f + bb.realized_w_f(f_len);
  for (std::size_t t = bb.s_t; t < t_end; ++t)
    for (std::size_t f = bb.s_f; f < f_end; ++f) mask(t, f) = 0.0f;
  return mask;
}

/// Replaced fraction of the clip for a box, after clamping.
inline double replaced_fraction(const BoundingBox& bb, std::size_t t_len, std::size_t f_len) {
  return static_cast<double>(bb.realized_w_t(t_len) * bb.realized_w_f(f_len)) /
         static_cast<double>(t_len * f_len);
}

/// Pairs anchor i with partner j = pi(i) for a random derangement pi and mixes
/// them. One lambda per batch; one box per pair. Labels use the realized
/// mixing coefficient.
inline std::vector<MixedPair> mix_batch(const std::vector<const Fbank*>& batch, const MixParams& params, Rng& rng) {
  const std::size_t n = batch.size();
  require(n >= 2, ErrorKind::Size, "mix_batch needs at least two samples");
  const std::size_t t_len = batch[0]->rows(), f_len = batch[0]->cols();
  for (const Fbank* e : batch)
    require(e->rows() == t_len && e->cols() == f_len, ErrorKind::Shape, "batch items must share (T, F)");

  std::vector<MixedPair> out(n);
  if (params.mode == MixMode::None) {
    for (std::size_t i = 0; i < n; ++i) {
      out[i].m = *batch[i];
      out[i].y.assign(n, 0.0);
      out[i].y[i] = 1.0;
      out[i].i = out[i].j = i;
      out[i].lam_eff = 1.0;
    }
    return out;
  }

  const double lambda = sample_lambda(params.alpha, rng);
  const auto perm = random_derangement(n, rng);
  for (std::size_t i = 0; i < n; ++i) {
    MixedPair& p = out[i];
    p.i = i;
    p.j = perm[i];
    const Fbank& ei = *batch[i];
    const Fbank& ej = *batch[p.j];
    p.m = Fbank(t_len, f_len);
    if (params.mode == MixMode::MixUp) {
      const auto lf = static_cast<float>(lambda);
      for (std::size_t k = 0; k < ei.size(); ++k)
        p.m.data()[k] = lf * ei.data()[k] + (1.0f - lf) * ej.data()[k];
      p.lam_eff = lambda;
    } else {
      p.box = params.mode == MixMode::TCutMix ? sample_bbox_t(t_len, f_len, lambda, rng)
                                              : sample_bbox_tf(t_len, f_len, lambda, rng);
      const auto mask = make_mask(p.box, t_len, f_len);
      for (std::size_t k = 0; k < ei.size(); ++k)
        p.m.data()[k] = mask.data()[k] != 0.0f ? ei.data()[k] : ej.data()[k];
      p.lam_eff = 1.0 - replaced_fraction(p.box, t_len, f_len);
    }
    p.y.assign(n, 0.0);
    p.y[i] = p.lam_eff;
    p.y[p.j] = 1.0 - p.lam_eff;
  }
  return out;
}

inline std::vector<MixedPair> mix_batch(const std::vector<Fbank>& batch, const MixParams& params, Rng& rng) {
  std::vector<const Fbank*> ptrs;
  ptrs.reserve(batch.size());
  for (const auto& e : batch) ptrs.push_back(&e);
  return mix_batch(ptrs, params, rng);
}

}  // namespace uamix
