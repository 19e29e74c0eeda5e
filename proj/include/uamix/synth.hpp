#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "uamix/dataset.hpp"
#include "uamix/error.hpp"
#include "uamix/random.hpp"

namespace uamix {

/// An amplitude-modulated ridge: energy at one mel bin, modulated at `rate`
/// cycles per clip.
struct Ridge {
  std::size_t bin = 0;
  double rate = 1.0;
};

struct SynthSpec {
  std::size_t n_classes = 8;
  std::size_t per_class = 50;
  std::size_t t_len = 64;
  std::size_t f_len = 8;
  std::vector<std::vector<Ridge>> class_signature;  // one entry per class
  double noise_sigma = 0.3;
  /// Per-item gain jitter: each ridge gain is drawn from U(1 - j, 1 + j).
  double gain_jitter = 0.5;
  /// Class-independent ridges added to every item at random bins and rates.
  std::size_t distractors = 0;
  double distractor_gain = 1.0;
  /// Class-independent bursts: a random band of bins lit for a short time
  /// span at a random position.
  std::size_t transients = 2;
  double transient_gain = 2.0;
  std::size_t transient_len = 8;
};

/// Signatures for `n_classes` classes over `f_len` bins. Classes are laid out
/// on a (bin group, modulation rate) grid, so classes that share bins differ
/// only in their temporal modulation.
inline std::vector<std::vector<Ridge>> default_signatures(std::size_t n_classes, std::size_t f_len) {
  static constexpr double kRates[] = {2.0, 6.0, 11.0, 15.0};
  const std::size_t groups = std::max<std::size_t>(1, std::min(f_len / 2, (n_classes + 1) / 2));
  std::vector<std::vector<Ridge>> sig(n_classes);
  for (std::size_t c = 0; c < n_classes; ++c) {
    const std::size_t g = c % groups;
    const double rate = kRates[(c / groups) % std::size(kRates)] + static_cast<double>(c / (groups * std::size(kRates)));
    sig[c].push_back({g, rate});
    if (g + groups < f_len) sig[c].push_back({g + groups, rate});
  }
  return sig;
}

/// Signatures where every class owns a disjoint set of bins.
inline std::vector<std::vector<Ridge>> disjoint_signatures(std::size_t n_classes, std::size_t f_len) {
  require(n_classes <= f_len, ErrorKind::Parameter, "disjoint signatures need f_len >= n_classes");
  std::vector<std::vector<Ridge>> sig(n_classes);
  for (std::size_t c = 0; c < n_classes; ++c) sig[c].push_back({c, 2.0 + static_cast<double>(c)});
  return sig;
}

inline void validate(const SynthSpec& spec) {
  require(spec.n_classes >= 2, ErrorKind::Parameter, "n_classes must be >= 2");
  require(spec.per_class >= 1, ErrorKind::Parameter, "per_class must be >= 1");
  require(spec.t_len >= 1 && spec.f_len >= 1, ErrorKind::Parameter, "t_len and f_len must be >= 1");
  require(spec.noise_sigma >= 0.0, ErrorKind::Parameter, "noise_sigma must be >= 0");
  require(spec.gain_jitter >= 0.0 && spec.gain_jitter < 1.0, ErrorKind::Parameter, "gain_jitter must be in [0, 1)");
  require(spec.class_signature.empty() || spec.class_signature.size() == spec.n_classes, ErrorKind::Parameter,
          "class_signature must have one entry per class");
  for (const auto& sig : spec.class_signature)
    for (const auto& r : sig) require(r.bin < spec.f_len, ErrorKind::Parameter, "signature bin out of range");
}

namespace detail {
inline void add_ridge(Fbank& m, std::size_t bin, double rate, double gain, double phase) {
  const double t_len = static_cast<double>(m.rows());
  for (std::size_t t = 0; t < m.rows(); ++t) {
    const double env = 0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * rate * static_cast<double>(t) / t_len + phase);
    m(t, bin) += static_cast<float>(gain * env);
  }
}
}  // namespace detail

/// Items are ordered class-major; item k of class c draws from its own
/// stream derived from (seed, c, k).
inline Dataset generate_synthetic(const SynthSpec& spec, std::uint64_t seed) {
  validate(spec);
  const auto signatures =
      spec.class_signature.empty() ? default_signatures(spec.n_classes, spec.f_len) : spec.class_signature;
  Dataset ds;
  ds.t_len = spec.t_len;
  ds.f_len = spec.f_len;
  ds.labels.emplace();
  ds.items.reserve(spec.n_classes * spec.per_class);
  for (std::size_t c = 0; c < spec.n_classes; ++c) {
    for (std::size_t k = 0; k < spec.per_class; ++k) {
      Rng rng = make_rng(seed, 0x5157 + c, k);
      Fbank m(spec.t_len, spec.f_len);
      for (const auto& r : signatures[c]) {
        const double gain = 1.0 + spec.gain_jitter * (2.0 * uniform01(rng) - 1.0);
        detail::add_ridge(m, r.bin, r.rate, gain, 2.0 * std::numbers::pi * uniform01(rng));
      }
      for (std::size_t d = 0; d < spec.distractors; ++d) {
        const std::size_t bin = uniform_index(rng, spec.f_len);
        const double rate = 1.0 + 15.0 * uniform01(rng);
        detail::add_ridge(m, bin, rate, spec.distractor_gain * uniform01(rng), 2.0 * std::numbers::pi * uniform01(rng));
      }
      for (std::size_t d = 0; d < spec.transients; ++d) {
        const std::size_t len = std::min(spec.transient_len, spec.t_len);
        const std::size_t t0 = uniform_index(rng, spec.t_len - len + 1);
        const std::size_t f0 = uniform_index(rng, spec.f_len);
        const std::size_t width = 1 + uniform_index(rng, spec.f_len - f0);
        const double gain = spec.transient_gain * (0.5 + 0.5 * uniform01(rng));
        for (std::size_t t = t0; t < t0 + len; ++t)
          for (std::size_t f = f0; f < f0 + width; ++f) m(t, f) += static_cast<float>(gain);
      }
      if (spec.noise_sigma > 0.0)
        for (auto& v : m.storage()) v += static_cast<float>(normal(rng, 0.0, spec.noise_sigma));
      ds.items.push_back(std::move(m));
      ds.labels->push_back(static_cast<int>(c));
    }
  }
  return ds;
}

}  // namespace uamix
