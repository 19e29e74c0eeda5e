#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "uamix/checkpoint.hpp"
#include "uamix/config.hpp"
#include "uamix/dataset.hpp"
#include "uamix/encoder.hpp"
#include "uamix/error.hpp"
#include "uamix/fbank.hpp"
#include "uamix/fewshot.hpp"
#include "uamix/synth.hpp"
#include "uamix/tuning.hpp"

namespace uamix {

/// Process exit status for an error kind: 2 usage/config, 3 I/O, 4 numerical.
inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Io:
    case ErrorKind::Corruption:
    case ErrorKind::Format: return 3;
    case ErrorKind::Numerical: return 4;
    default: return 2;
  }
}

namespace detail {

inline void ensure_parent(const std::filesystem::path& p) {
  const auto parent = p.parent_path();
  if (parent.empty()) return;
  std::error_code ec;
  std::filesystem::create_directories(parent, ec);
  require(!ec, ErrorKind::Io, "cannot create directory " + parent.string());
}

inline void ensure_dir(const std::filesystem::path& p) {
  std::error_code ec;
  std::filesystem::create_directories(p, ec);
  require(!ec && std::filesystem::is_directory(p), ErrorKind::Io, "cannot create directory " + p.string());
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  ensure_parent(p);
  std::ofstream out(p, std::ios::trunc);
  require(bool(out), ErrorKind::Io, "cannot write " + p.string());
  out << text;
  out.close();
  require(!out.fail(), ErrorKind::Io, "write failed: " + p.string());
}

inline void check_matches(const EncoderConfig& enc, const Dataset& ds) {
  require(enc.t_len == ds.t_len && enc.f_len == ds.f_len, ErrorKind::Config,
          "dataset items are " + std::to_string(ds.t_len) + "x" + std::to_string(ds.f_len) + " but the encoder expects " +
              std::to_string(enc.t_len) + "x" + std::to_string(enc.f_len));
}

}  // namespace detail

inline Dataset cmd_synth(const RunConfig& cfg, const std::filesystem::path& out) {
  validate(cfg);
  Dataset ds = generate_synthetic(cfg.synth_spec(), cfg.seed);
  detail::ensure_parent(out);
  save_dataset(ds, out);
  return ds;
}

/// Fbanks of mono 16-bit WAV files, cropped to the shortest clip.
inline Dataset cmd_ingest(const std::vector<std::filesystem::path>& wavs, const std::vector<int>& labels,
                          const FbankOptions& opt, const std::filesystem::path& out) {
  require(!wavs.empty(), ErrorKind::Config, "no input files");
  require(labels.empty() || labels.size() == wavs.size(), ErrorKind::Config, "need one label per input file");
  std::vector<Fbank> banks;
  for (const auto& w : wavs) {
    const auto audio = read_wav(w);
    FbankOptions o = opt;
    o.sample_rate = audio.sample_rate;
    banks.push_back(compute_fbank(audio.samples, o));
  }
  std::size_t t_len = banks.front().rows();
  for (const auto& b : banks) t_len = std::min(t_len, b.rows());
  Dataset ds;
  ds.t_len = t_len;
  ds.f_len = opt.n_mels;
  for (auto& b : banks) {
    Fbank m(t_len, b.cols());
    std::copy(b.data(), b.data() + t_len * b.cols(), m.data());
    ds.items.push_back(std::move(m));
  }
  if (!labels.empty()) ds.labels = labels;
  validate(ds);
  detail::ensure_parent(out);
  save_dataset(ds, out);
  return ds;
}

struct PretrainResult {
  EncoderState<float> state;
  std::vector<double> epoch_losses;
};

/// MAE pretraining. With `resume`, continues from the stored step; the
/// checkpoint's encoder shape must equal the configured one.
inline PretrainResult cmd_pretrain(const RunConfig& cfg, const std::filesystem::path& data,
                                   const std::filesystem::path& out, const std::filesystem::path& resume = {},
                                   const std::filesystem::path& log = {}) {
  validate(cfg);
  const Dataset ds = load_dataset(data);
  detail::check_matches(cfg.encoder, ds);
  PretrainResult r;
  if (!resume.empty()) {
    r.state = load_checkpoint<float>(resume);
    require(r.state.config == cfg.encoder, ErrorKind::Config, "checkpoint encoder shape does not match the config");
    require(r.state.stage == Stage::Init || r.state.stage == Stage::Mae, ErrorKind::Config,
            "can only resume pretraining from a pretraining checkpoint");
  } else {
    r.state = init_encoder<float>(cfg.encoder, cfg.seed);
  }
  r.epoch_losses = run_pretrain(r.state, ds, cfg.pretrain_config());
  detail::ensure_parent(out);
  save_checkpoint(r.state, out);
  if (!log.empty()) {
    std::string csv = "epoch,loss\n";
    const std::size_t first = cfg.pretrain.epochs - r.epoch_losses.size();
    char buf[64];
    for (std::size_t e = 0; e < r.epoch_losses.size(); ++e) {
      std::snprintf(buf, sizeof buf, "%zu,%.17g\n", first + e, r.epoch_losses[e]);
      csv += buf;
    }
    detail::write_text(log, csv);
  }
  return r;
}

struct TuneResult {
  EncoderState<float> state;
  RunLog stage1;
  RunLog stage2;
};

/// Stage 1 then stage 2. Writes stage1.ckpt, stage1.csv, stage2.ckpt and
/// stage2.csv under `out_dir`.
inline TuneResult cmd_tune(const RunConfig& cfg, const std::filesystem::path& data, const std::filesystem::path& in_ckpt,
                           const std::filesystem::path& out_dir) {
  validate(cfg);
  const Dataset ds = load_dataset(data);
  TuneResult r;
  r.state = load_checkpoint<float>(in_ckpt);
  detail::check_matches(r.state.config, ds);
  require(r.state.stage == Stage::Init || r.state.stage == Stage::Mae, ErrorKind::Config,
          "tuning starts from a pretrained checkpoint, got stage '" + to_string(r.state.stage) + "'");
  detail::ensure_dir(out_dir);
  const TuneConfig tc = cfg.tune_config();
  r.stage1 = run_stage1(r.state, ds, tc);
  save_checkpoint(r.state, out_dir / "stage1.ckpt");
  r.stage1.write_csv(out_dir / "stage1.csv");
  r.stage2 = run_stage2(r.state, ds, tc);
  save_checkpoint(r.state, out_dir / "stage2.ckpt");
  r.stage2.write_csv(out_dir / "stage2.csv");
  return r;
}

enum class FeatureSource { Encoder, Oracle, Random };

inline FeatureSource parse_feature_source(const std::string& s) {
  if (s == "encoder") return FeatureSource::Encoder;
  if (s == "oracle") return FeatureSource::Oracle;
  if (s == "random") return FeatureSource::Random;
  fail(ErrorKind::Config, "unknown feature source '" + s + "' (expected encoder, oracle or random)");
}

/// One-hot rows of the true class.
inline Matrix<double> oracle_features(const std::vector<int>& labels, std::size_t n_classes) {
  Matrix<double> f(labels.size(), n_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) f(i, static_cast<std::size_t>(labels[i])) = 1.0;
  return f;
}

/// Isotropic Gaussian directions, one per item.
inline Matrix<double> random_features(std::size_t n, std::size_t dim, std::uint64_t seed) {
  Rng rng = make_rng(seed, 0xFEA7);
  Matrix<double> f(n, dim);
  for (std::size_t i = 0; i < n; ++i) {
    auto row = f.row(i);
    for (auto& v : row) v = normal(rng, 0.0, 1.0);
    const double nrm = l2_norm<double>(row);
    for (auto& v : row) v /= nrm;
  }
  return f;
}

inline EvalReport cmd_eval(const RunConfig& cfg, const std::filesystem::path& data, const std::filesystem::path& ckpt,
                           FeatureSource source = FeatureSource::Encoder, const std::filesystem::path& report = {}) {
  require(cfg.eval.episodes >= 2, ErrorKind::Config, "a confidence interval needs --episodes >= 2");
  validate(cfg);
  const Dataset ds = load_dataset(data);
  require(ds.labels.has_value(), ErrorKind::Config, "evaluation needs a labeled dataset");
  Matrix<double> feats;
  std::string source_name;
  switch (source) {
    case FeatureSource::Encoder: {
      const auto st = load_checkpoint<float>(ckpt);
      detail::check_matches(st.config, ds);
      feats = backbone_features(st, ds, cfg.threads);
      source_name = "encoder";
      break;
    }
    case FeatureSource::Oracle:
      feats = oracle_features(*ds.labels, ds.num_classes());
      source_name = "oracle";
      break;
    case FeatureSource::Random:
      feats = random_features(ds.size(), cfg.encoder.dim, cfg.eval_seed());
      source_name = "random";
      break;
  }
  EvalReport rep;
  try {
    rep = evaluate_features(feats, *ds.labels, cfg.eval.way, cfg.eval.shot, cfg.eval.query_per_class,
                            cfg.eval.episodes, cfg.eval_seed(), cfg.threads);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::Capacity || e.kind() == ErrorKind::Parameter) fail(ErrorKind::Config, e.what());
    throw;
  }
  if (!report.empty()) {
    auto j = rep.to_json();
    j["features"] = source_name;
    if (source == FeatureSource::Encoder) j["checkpoint"] = ckpt.string();
    detail::write_text(report, j.dump(2) + "\n");
  }
  return rep;
}

inline void cmd_export_embeddings(const RunConfig& cfg, const std::filesystem::path& data,
                                  const std::filesystem::path& ckpt, const std::filesystem::path& out) {
  const Dataset ds = load_dataset(data);
  const auto st = load_checkpoint<float>(ckpt);
  detail::check_matches(st.config, ds);
  detail::ensure_parent(out);
  export_embeddings(st, ds, out, cfg.threads);
}

}  // namespace uamix
