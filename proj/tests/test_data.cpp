#include <cmath>
#include <cstring>
#include <functional>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "uamix/dataset.hpp"
#include "uamix/fbank.hpp"
#include "uamix/synth.hpp"

using namespace uamix;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("uamix_test_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void expect_kind(const std::function<void()>& fn, ErrorKind kind) {
  try {
    fn();
    FAIL() << "expected " << to_string(kind);
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), kind) << e.what();
  }
}

std::vector<double> sine(std::size_t n, double hz, double sr) {
  std::vector<double> s(n);
  for (std::size_t i = 0; i < n; ++i) s[i] = std::sin(2.0 * std::numbers::pi * hz * static_cast<double>(i) / sr);
  return s;
}

// O(n^2) DFT with filters built straight from the HTK mel formula.
std::vector<double> naive_fbank_frame(const double* frame, std::size_t n, std::size_t n_mels, double sr) {
  std::vector<double> mag(n / 2 + 1);
  for (std::size_t k = 0; k < mag.size(); ++k) {
    double re = 0, im = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double w = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n)));
      const double a = -2.0 * std::numbers::pi * static_cast<double>(k * i) / static_cast<double>(n);
      re += frame[i] * w * std::cos(a);
      im += frame[i] * w * std::sin(a);
    }
    mag[k] = std::sqrt(re * re + im * im);
  }
  const double top = 2595.0 * std::log10(1.0 + sr / 2.0 / 700.0);
  auto edge = [&](std::size_t i) {
    return 700.0 * (std::pow(10.0, top * static_cast<double>(i) / static_cast<double>(n_mels + 1) / 2595.0) - 1.0);
  };
  std::vector<double> out(n_mels);
  for (std::size_t b = 0; b < n_mels; ++b) {
    const double lo = edge(b), c = edge(b + 1), hi = edge(b + 2);
    double e = 0;
    for (std::size_t k = 0; k < mag.size(); ++k) {
      const double f = static_cast<double>(k) * sr / static_cast<double>(n);
      double w = 0;
      if (f >= lo && f <= c) w = (f - lo) / (c - lo);
      else if (f > c && f <= hi) w = (hi - f) / (hi - c);
      e += w * mag[k];
    }
    out[b] = std::log(std::max(e, 1e-10));
  }
  return out;
}

}  // namespace

TEST(Fbank, FrameCountFormula) {
  EXPECT_EQ(frame_count(16000, 400, 160), 98u);
  for (std::size_t len = 400; len < 1400; len += 37)
    for (std::size_t hop : {1u, 7u, 160u, 400u}) EXPECT_EQ(frame_count(len, 400, hop), 1 + (len - 400) / hop);
  std::vector<double> pcm(16000, 0.0);
  EXPECT_EQ(compute_fbank(pcm).rows(), 98u);
  EXPECT_EQ(compute_fbank(pcm).cols(), 128u);
}

TEST(Fbank, SilenceHitsLogFloor) {
  std::vector<double> pcm(4000, 0.0);
  const auto fb = compute_fbank(pcm);
  for (float v : fb.storage()) EXPECT_EQ(v, static_cast<float>(std::log(1e-10)));
}

TEST(Fbank, SinusoidAtMelCenterPeaksInItsBin) {
  FbankOptions opt;
  opt.n_mels = 40;
  for (std::size_t b : {8u, 15u, 22u, 30u, 37u}) {
    const double hz = mel_center_hz(b, opt.n_mels, opt.sample_rate);
    const auto pcm = sine(4000, hz, opt.sample_rate);
    const auto fb = compute_fbank(pcm, opt);
    for (std::size_t t = 1; t + 1 < fb.rows(); ++t) {
      const auto row = naive_fbank_frame(pcm.data() + t * opt.hop_len, opt.win_len, opt.n_mels, opt.sample_rate);
      std::size_t arg = 0, arg_oracle = 0;
      for (std::size_t k = 0; k < opt.n_mels; ++k) {
        if (fb(t, k) > fb(t, arg)) arg = k;
        if (row[k] > row[arg_oracle]) arg_oracle = k;
        EXPECT_NEAR(fb(t, k), row[k], 1e-4 * std::max(1.0, std::abs(row[k])));
      }
      EXPECT_EQ(arg, b);
      EXPECT_EQ(arg_oracle, b);
    }
  }
}

TEST(Fbank, TrailingPartialHopIsIgnored) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  std::vector<double> pcm(2000);
  for (auto& v : pcm) v = nd(rng);
  const auto base = compute_fbank(pcm);
  const std::size_t used = 400 + (base.rows() - 1) * 160;
  std::vector<double> trimmed(pcm.begin(), pcm.begin() + static_cast<std::ptrdiff_t>(used));
  const auto a = compute_fbank(trimmed);
  for (std::size_t extra = 1; extra < 160; extra += 31) {
    std::vector<double> longer = trimmed;
    for (std::size_t i = 0; i < extra; ++i) longer.push_back(nd(rng));
    EXPECT_EQ(compute_fbank(longer), a);
  }
}

TEST(Fbank, RejectsBadInput) {
  std::vector<double> shortpcm(100, 0.0);
  expect_kind([&] { compute_fbank(shortpcm); }, ErrorKind::Length);
  expect_kind([&] { compute_fbank(std::vector<double>{}); }, ErrorKind::Length);
  std::vector<double> bad(1000, 0.0);
  bad[10] = std::nan("");
  expect_kind([&] { compute_fbank(bad); }, ErrorKind::Input);
}

TEST(Wav, ReadsPcm16Mono) {
  const auto dir = temp_dir("wav");
  const auto path = dir / "tone.wav";
  const std::vector<std::int16_t> pcm = {0, 16384, -16384, 32767, -32768};
  {
    std::ofstream out(path, std::ios::binary);
    auto u32 = [&](std::uint32_t v) { for (int i = 0; i < 4; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff)); };
    auto u16 = [&](std::uint16_t v) { out.put(static_cast<char>(v & 0xff)); out.put(static_cast<char>(v >> 8)); };
    out.write("RIFF", 4);
    u32(36 + 2 * static_cast<std::uint32_t>(pcm.size()));
    out.write("WAVEfmt ", 8);
    u32(16);
    u16(1);
    u16(1);
    u32(8000);
    u32(16000);
    u16(2);
    u16(16);
    out.write("data", 4);
    u32(2 * static_cast<std::uint32_t>(pcm.size()));
    for (auto s : pcm) u16(static_cast<std::uint16_t>(s));
  }
  const auto w = read_wav(path);
  EXPECT_EQ(w.sample_rate, 8000.0);
  ASSERT_EQ(w.samples.size(), pcm.size());
  for (std::size_t i = 0; i < pcm.size(); ++i) EXPECT_DOUBLE_EQ(w.samples[i], pcm[i] / 32768.0);
  expect_kind([&] { read_wav(dir / "missing.wav"); }, ErrorKind::Io);
}

TEST(Synth, CountsAndLabels) {
  SynthSpec spec;
  const auto ds = generate_synthetic(spec, 1);
  EXPECT_EQ(ds.size(), 400u);
  EXPECT_EQ(ds.num_classes(), 8u);
  std::vector<int> count(8, 0);
  for (int l : *ds.labels) ++count[static_cast<std::size_t>(l)];
  for (int c : count) EXPECT_EQ(c, 50);
  for (const auto& m : ds.items) {
    EXPECT_EQ(m.rows(), 64u);
    EXPECT_EQ(m.cols(), 8u);
    for (float v : m.storage()) EXPECT_TRUE(std::isfinite(v));
  }
}

TEST(Synth, PureFunctionOfSpecAndSeed) {
  SynthSpec spec;
  spec.per_class = 5;
  const auto a = generate_synthetic(spec, 7), b = generate_synthetic(spec, 7), c = generate_synthetic(spec, 8);
  EXPECT_EQ(a.items, b.items);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NE(a.items, c.items);
}

TEST(Synth, NoiselessSameStreamItemsAreIdentical) {
  SynthSpec spec;
  spec.per_class = 3;
  spec.noise_sigma = 0;
  const auto a = generate_synthetic(spec, 11), b = generate_synthetic(spec, 11);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.items[i], b.items[i]);
}

TEST(Synth, DisjointSignaturesSeparateClasses) {
  SynthSpec spec;
  spec.per_class = 4;
  spec.noise_sigma = 0;
  spec.transients = 0;
  spec.class_signature = disjoint_signatures(8, 8);
  const auto ds = generate_synthetic(spec, 2);
  for (std::size_t i = 0; i < ds.size(); ++i)
    for (std::size_t j = 0; j < ds.size(); ++j) {
      if ((*ds.labels)[i] == (*ds.labels)[j]) continue;
      double d = 0;
      for (std::size_t k = 0; k < ds.items[i].size(); ++k) {
        const double x = ds.items[i].data()[k] - ds.items[j].data()[k];
        d += x * x;
      }
      EXPECT_GT(std::sqrt(d), 0.0);
    }
}

TEST(Synth, RejectsInvalidSpec) {
  SynthSpec spec;
  spec.n_classes = 1;
  expect_kind([&] { generate_synthetic(spec, 0); }, ErrorKind::Parameter);
  spec = {};
  spec.noise_sigma = -1;
  expect_kind([&] { generate_synthetic(spec, 0); }, ErrorKind::Parameter);
}

TEST(DatasetIo, RoundTripIsExact) {
  const auto dir = temp_dir("roundtrip");
  SynthSpec spec;
  spec.per_class = 3;
  const auto ds = generate_synthetic(spec, 5);
  save_dataset(ds, dir / "d.json");
  EXPECT_TRUE(fs::exists(dir / "d.f32"));
  const auto back = load_dataset(dir / "d.json");
  EXPECT_EQ(back.t_len, ds.t_len);
  EXPECT_EQ(back.f_len, ds.f_len);
  EXPECT_EQ(back.items, ds.items);
  EXPECT_EQ(back.labels, ds.labels);
  EXPECT_EQ(fs::file_size(dir / "d.f32"), ds.size() * 64 * 8 * 4);
}

TEST(DatasetIo, UnlabeledRoundTrip) {
  const auto dir = temp_dir("unlabeled");
  Dataset ds;
  ds.t_len = 2;
  ds.f_len = 3;
  ds.items.push_back(Fbank(2, 3));
  ds.items[0](1, 2) = -0.0f;
  ds.items[0](0, 1) = 1e-38f;
  save_dataset(ds, dir / "u.json");
  const auto back = load_dataset(dir / "u.json");
  EXPECT_FALSE(back.labels.has_value());
  EXPECT_EQ(std::memcmp(back.items[0].data(), ds.items[0].data(), 24), 0);
}

TEST(DatasetIo, TruncatedBlobIsCorruption) {
  const auto dir = temp_dir("trunc");
  SynthSpec spec;
  spec.per_class = 2;
  save_dataset(generate_synthetic(spec, 0), dir / "d.json");
  fs::resize_file(dir / "d.f32", fs::file_size(dir / "d.f32") - 1);
  expect_kind([&] { load_dataset(dir / "d.json"); }, ErrorKind::Corruption);
}

TEST(DatasetIo, ManifestCountMismatchIsCorruption) {
  const auto dir = temp_dir("mismatch");
  SynthSpec spec;
  spec.n_classes = 3;
  spec.per_class = 1;
  save_dataset(generate_synthetic(spec, 0), dir / "d.json");
  auto j = detail::read_json_file(dir / "d.json");
  j["n"] = 2;
  j["labels"] = {0, 1};
  std::ofstream(dir / "d.json") << j.dump();
  expect_kind([&] { load_dataset(dir / "d.json"); }, ErrorKind::Corruption);
}

TEST(DatasetIo, UnknownDtypeIsFormatError) {
  const auto dir = temp_dir("dtype");
  SynthSpec spec;
  spec.per_class = 1;
  save_dataset(generate_synthetic(spec, 0), dir / "d.json");
  auto j = detail::read_json_file(dir / "d.json");
  j["dtype"] = "float16";
  std::ofstream(dir / "d.json") << j.dump();
  expect_kind([&] { load_dataset(dir / "d.json"); }, ErrorKind::Format);
}

TEST(DatasetIo, MissingFilesAreIoErrors) {
  const auto dir = temp_dir("missing");
  expect_kind([&] { load_dataset(dir / "nope.json"); }, ErrorKind::Io);
  SynthSpec spec;
  spec.per_class = 1;
  save_dataset(generate_synthetic(spec, 0), dir / "d.json");
  fs::remove(dir / "d.f32");
  expect_kind([&] { load_dataset(dir / "d.json"); }, ErrorKind::Io);
}

TEST(DatasetIo, MalformedManifestReportsLocation) {
  const auto dir = temp_dir("malformed");
  std::ofstream(dir / "d.json") << "{\n  \"n\": 3,\n  oops\n}";
  try {
    load_dataset(dir / "d.json");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Format);
    EXPECT_NE(std::string(e.what()).find(":3:"), std::string::npos) << e.what();
  }
}
