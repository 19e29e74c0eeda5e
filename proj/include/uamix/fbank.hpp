#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numbers>
#include <span>
#include <vector>

#include <fftw3.h>

#include "uamix/dataset.hpp"
#include "uamix/error.hpp"

namespace uamix {

struct FbankOptions {
  double sample_rate = 16000.0;
  std::size_t n_mels = 128;
  std::size_t win_len = 400;  // 25 ms at 16 kHz
  std::size_t hop_len = 160;  // 10 ms at 16 kHz
};

inline constexpr double kLogFloor = 1e-10;

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

inline std::size_t frame_count(std::size_t n_samples, std::size_t win_len, std::size_t hop_len) {
  require(n_samples >= win_len, ErrorKind::Length, "signal shorter than one window");
  return 1 + (n_samples - win_len) / hop_len;
}

/// Corner frequencies of the triangular filters: n_mels + 2 points equally
/// spaced on the mel scale over [0, sr/2]. Filter b peaks at point b + 1.
inline std::vector<double> mel_points_hz(std::size_t n_mels, double sample_rate) {
  std::vector<double> pts(n_mels + 2);
  const double top = hz_to_mel(sample_rate / 2.0);
  for (std::size_t i = 0; i < pts.size(); ++i)
    pts[i] = mel_to_hz(top * static_cast<double>(i) / static_cast<double>(n_mels + 1));
  return pts;
}

inline double mel_center_hz(std::size_t bin, std::size_t n_mels, double sample_rate) {
  return mel_points_hz(n_mels, sample_rate)[bin + 1];
}

/// n_mels × (n_fft/2 + 1) triangular weights over DFT bin frequencies.
inline Matrix<double> mel_filterbank(std::size_t n_mels, std::size_t n_fft, double sample_rate) {
  const auto pts = mel_points_hz(n_mels, sample_rate);
  const std::size_t n_bins = n_fft / 2 + 1;
  Matrix<double> fb(n_mels, n_bins);
  for (std::size_t b = 0; b < n_mels; ++b) {
    const double lo = pts[b], c = pts[b + 1], hi = pts[b + 2];
    for (std::size_t k = 0; k < n_bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate / static_cast<double>(n_fft);
      if (f >= lo && f <= c && c > lo) fb(b, k) = (f - lo) / (c - lo);
      else if (f > c && f <= hi && hi > c) fb(b, k) = (hi - f) / (hi - c);
    }
  }
  return fb;
}

/// Periodic Hann window.
inline std::vector<double> hann_window(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i)
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n));
  return w;
}

namespace detail {
// FFTW planning is not thread-safe; execution with new-array functions is.
inline std::mutex& fftw_plan_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace detail

/// Natural-log mel energies of the Hann-windowed magnitude spectrum, one row
/// per full frame. The DFT length equals `win_len`.
inline Fbank compute_fbank(std::span<const double> pcm, const FbankOptions& opt = {}) {
  require(opt.n_mels >= 1, ErrorKind::Parameter, "n_mels must be >= 1");
  require(opt.win_len >= 1 && opt.hop_len >= 1 && opt.hop_len <= opt.win_len, ErrorKind::Parameter,
          "need 0 < hop_len <= win_len");
  require(!pcm.empty(), ErrorKind::Length, "empty pcm");
  for (double s : pcm) require(std::isfinite(s), ErrorKind::Input, "non-finite sample");
  const std::size_t n_frames = frame_count(pcm.size(), opt.win_len, opt.hop_len);
  const std::size_t n_fft = opt.win_len;
  const std::size_t n_bins = n_fft / 2 + 1;

  const auto window = hann_window(n_fft);
  const auto fb = mel_filterbank(opt.n_mels, n_fft, opt.sample_rate);

  double* in = fftw_alloc_real(n_fft);
  fftw_complex* out = fftw_alloc_complex(n_bins);
  fftw_plan plan;
  {
    std::lock_guard lock(detail::fftw_plan_mutex());
    plan = fftw_plan_dft_r2c_1d(static_cast<int>(n_fft), in, out, FFTW_ESTIMATE);
  }

  Fbank result(n_frames, opt.n_mels);
  std::vector<double> mag(n_bins);
  for (std::size_t t = 0; t < n_frames; ++t) {
    const double* frame = pcm.data() + t * opt.hop_len;
    for (std::size_t i = 0; i < n_fft; ++i) in[i] = frame[i] * window[i];
    fftw_execute(plan);
    for (std::size_t k = 0; k < n_bins; ++k) mag[k] = std::hypot(out[k][0], out[k][1]);
    for (std::size_t b = 0; b < opt.n_mels; ++b) {
      double e = 0.0;
      for (std::size_t k = 0; k < n_bins; ++k) e += fb(b, k) * mag[k];
      result(t, b) = static_cast<float>(std::log(std::max(e, kLogFloor)));
    }
  }

  {
    std::lock_guard lock(detail::fftw_plan_mutex());
    fftw_destroy_plan(plan);
  }
  fftw_free(out);
  fftw_free(in);
  return result;
}

struct WavAudio {
  double sample_rate = 0.0;
  std::vector<double> samples;  // scaled to [-1, 1)
};

/// Reads a 16-bit PCM mono RIFF/WAVE file.
inline WavAudio read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(bool(in), ErrorKind::Io, "cannot open " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto u16 = [&](std::size_t off) {
    return static_cast<std::uint16_t>(static_cast<unsigned char>(bytes[off]) |
                                      (static_cast<unsigned char>(bytes[off + 1]) << 8));
  };
  auto u32 = [&](std::size_t off) {
    return static_cast<std::uint32_t>(u16(off)) | (static_cast<std::uint32_t>(u16(off + 2)) << 16);
  };
  require(bytes.size() >= 12 && std::memcmp(bytes.data(), "RIFF", 4) == 0 &&
              std::memcmp(bytes.data() + 8, "WAVE", 4) == 0,
          ErrorKind::Format, path.string() + " is not a RIFF/WAVE file");

  WavAudio wav;
  bool have_fmt = false;
  std::size_t off = 12;
  while (off + 8 <= bytes.size()) {
    const std::uint32_t chunk = u32(off + 4);
    const std::size_t body = off + 8;
    require(body + chunk <= bytes.size(), ErrorKind::Corruption, "truncated WAV chunk");
    if (std::memcmp(bytes.data() + off, "fmt ", 4) == 0) {
      require(chunk >= 16, ErrorKind::Format, "short fmt chunk");
      require(u16(body) == 1, ErrorKind::Format, "only PCM WAV is supported");
      require(u16(body + 2) == 1, ErrorKind::Format, "only mono WAV is supported");
      require(u16(body + 14) == 16, ErrorKind::Format, "only 16-bit WAV is supported");
      wav.sample_rate = static_cast<double>(u32(body + 4));
      have_fmt = true;
    } else if (std::memcmp(bytes.data() + off, "data", 4) == 0) {
      require(have_fmt, ErrorKind::Format, "data chunk before fmt chunk");
      wav.samples.resize(chunk / 2);
      for (std::size_t i = 0; i < wav.samples.size(); ++i)
        wav.samples[i] = static_cast<std::int16_t>(u16(body + 2 * i)) / 32768.0;
      return wav;
    }
    off = body + chunk + (chunk & 1u);
  }
  fail(ErrorKind::Format, path.string() + " has no data chunk");
}

}  // namespace uamix
