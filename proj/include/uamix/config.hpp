#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "uamix/checkpoint.hpp"
#include "uamix/dataset.hpp"
#include "uamix/encoder.hpp"
#include "uamix/error.hpp"
#include "uamix/mixing.hpp"
#include "uamix/synth.hpp"
#include "uamix/tuning.hpp"

namespace uamix {

struct EvalConfig {
  std::size_t way = 5;
  std::size_t shot = 1;
  std::size_t query_per_class = 15;
  std::size_t episodes = 600;
  std::optional<std::uint64_t> seed;  // falls back to RunConfig::seed
};

struct PathConfig {
  std::string data = "data/synth.json";
  std::string pretrain_ckpt = "runs/mae.ckpt";
  std::string tune_dir = "runs/tune";
  std::string report = "runs/report.json";
  std::string embeddings = "runs/embeddings.csv";
};

/// Everything a pipeline run needs. `seed` and `threads` are copied into the
/// per-stage configs by `resolved()`.
struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  SynthSpec synth;
  std::string signature = "default";  // default | disjoint
  EncoderConfig encoder;
  PretrainConfig pretrain;
  TuneConfig tune;
  EvalConfig eval;
  PathConfig paths;

  SynthSpec synth_spec() const {
    SynthSpec s = synth;
    if (s.class_signature.empty() && signature == "disjoint") s.class_signature = disjoint_signatures(s.n_classes, s.f_len);
    return s;
  }
  PretrainConfig pretrain_config() const {
    PretrainConfig p = pretrain;
    p.seed = seed;
    p.threads = threads;
    return p;
  }
  TuneConfig tune_config() const {
    TuneConfig t = tune;
    t.seed = seed;
    t.threads = threads;
    return t;
  }
  std::uint64_t eval_seed() const { return eval.seed.value_or(seed); }
};

namespace detail {

template <class T>
void read_key(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    fail(ErrorKind::Config, where + "." + key + " has the wrong type");
  }
}

inline void read_synth(const nlohmann::json& j, RunConfig& c) {
  reject_unknown_keys(j,
                      {"n_classes", "per_class", "t_len", "f_len", "noise_sigma", "gain_jitter", "distractors",
                       "distractor_gain", "transients", "transient_gain", "transient_len", "signature"},
                      "synth");
  auto& s = c.synth;
  read_key(j, "n_classes", s.n_classes, "synth");
  read_key(j, "per_class", s.per_class, "synth");
  read_key(j, "t_len", s.t_len, "synth");
  read_key(j, "f_len", s.f_len, "synth");
  read_key(j, "noise_sigma", s.noise_sigma, "synth");
  read_key(j, "gain_jitter", s.gain_jitter, "synth");
  read_key(j, "distractors", s.distractors, "synth");
  read_key(j, "distractor_gain", s.distractor_gain, "synth");
  read_key(j, "transients", s.transients, "synth");
  read_key(j, "transient_gain", s.transient_gain, "synth");
  read_key(j, "transient_len", s.transient_len, "synth");
  if (!j.contains("signature")) return;
  const auto& sig = j.at("signature");
  if (sig.is_string()) {
    c.signature = sig.get<std::string>();
    require(c.signature == "default" || c.signature == "disjoint", ErrorKind::Config,
            "synth.signature must be \"default\", \"disjoint\" or a list of ridge lists");
    return;
  }
  require(sig.is_array(), ErrorKind::Config, "synth.signature must be a string or an array");
  s.class_signature.clear();
  for (const auto& cls : sig) {
    require(cls.is_array(), ErrorKind::Config, "synth.signature entries must be arrays of ridges");
    std::vector<Ridge> ridges;
    for (const auto& r : cls) {
      reject_unknown_keys(r, {"bin", "rate"}, "synth.signature ridge");
      require(r.contains("bin") && r.contains("rate"), ErrorKind::Config, "ridges need \"bin\" and \"rate\"");
      Ridge rd;
      read_key(r, "bin", rd.bin, "synth.signature");
      read_key(r, "rate", rd.rate, "synth.signature");
      ridges.push_back(rd);
    }
    s.class_signature.push_back(std::move(ridges));
  }
  c.signature = "custom";
}

inline void read_pretrain(const nlohmann::json& j, PretrainConfig& p) {
  reject_unknown_keys(j, {"epochs", "lr", "batch", "mask_ratio"}, "pretrain");
  read_key(j, "epochs", p.epochs, "pretrain");
  read_key(j, "lr", p.lr, "pretrain");
  read_key(j, "batch", p.batch, "pretrain");
  read_key(j, "mask_ratio", p.mask_ratio, "pretrain");
}

inline void read_tune(const nlohmann::json& j, TuneConfig& t) {
  reject_unknown_keys(j,
                      {"stage1_epochs", "stage1_lr", "stage1_batch", "stage2_epochs", "stage2_lr", "stage2_batch",
                       "llrd_factor", "tau", "k", "queue_capacity", "mix", "alpha", "momentum", "warmup_fraction"},
                      "tune");
  read_key(j, "stage1_epochs", t.stage1_epochs, "tune");
  read_key(j, "stage1_lr", t.stage1_lr, "tune");
  read_key(j, "stage1_batch", t.stage1_batch, "tune");
  read_key(j, "stage2_epochs", t.stage2_epochs, "tune");
  read_key(j, "stage2_lr", t.stage2_lr, "tune");
  read_key(j, "stage2_batch", t.stage2_batch, "tune");
  read_key(j, "llrd_factor", t.llrd_factor, "tune");
  read_key(j, "tau", t.tau, "tune");
  read_key(j, "k", t.k, "tune");
  read_key(j, "queue_capacity", t.queue_capacity, "tune");
  read_key(j, "alpha", t.mix.alpha, "tune");
  read_key(j, "momentum", t.momentum, "tune");
  read_key(j, "warmup_fraction", t.warmup_fraction, "tune");
  if (j.contains("mix")) {
    std::string m;
    read_key(j, "mix", m, "tune");
    try {
      t.mix.mode = parse_mix_mode(m);
    } catch (const Error& e) {
      fail(ErrorKind::Config, std::string("tune.mix: ") + e.what());
    }
  }
}

inline void read_eval(const nlohmann::json& j, EvalConfig& e) {
  reject_unknown_keys(j, {"way", "shot", "query_per_class", "episodes", "seed"}, "eval");
  read_key(j, "way", e.way, "eval");
  read_key(j, "shot", e.shot, "eval");
  read_key(j, "query_per_class", e.query_per_class, "eval");
  read_key(j, "episodes", e.episodes, "eval");
  if (j.contains("seed")) {
    std::uint64_t s = 0;
    read_key(j, "seed", s, "eval");
    e.seed = s;
  }
}

inline void read_paths(const nlohmann::json& j, PathConfig& p) {
  reject_unknown_keys(j, {"data", "pretrain_ckpt", "tune_dir", "report", "embeddings"}, "paths");
  read_key(j, "data", p.data, "paths");
  read_key(j, "pretrain_ckpt", p.pretrain_ckpt, "paths");
  read_key(j, "tune_dir", p.tune_dir, "paths");
  read_key(j, "report", p.report, "paths");
  read_key(j, "embeddings", p.embeddings, "paths");
}

}  // namespace detail

/// Checks every section; errors are config errors.
inline void validate(const RunConfig& c) {
  require(c.threads >= 1, ErrorKind::Config, "threads must be >= 1");
  try {
    validate(c.synth_spec());
    validate(c.encoder);
  } catch (const Error& e) {
    fail(ErrorKind::Config, e.what());
  }
  require(c.synth.t_len == c.encoder.t_len && c.synth.f_len == c.encoder.f_len, ErrorKind::Config,
          "synth and encoder disagree on t_len/f_len");
  validate(c.pretrain_config());
  validate(c.tune_config());
  require(c.eval.way >= 1 && c.eval.shot >= 1 && c.eval.query_per_class >= 1, ErrorKind::Config,
          "eval way, shot and query_per_class must be >= 1");
  require(c.eval.episodes >= 2, ErrorKind::Config, "eval episodes must be >= 2");
}

/// Missing sections and keys keep their defaults; unknown keys are rejected.
inline RunConfig config_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j, {"seed", "threads", "synth", "encoder", "pretrain", "tune", "eval", "paths"}, "config");
  RunConfig c;
  detail::read_key(j, "seed", c.seed, "config");
  detail::read_key(j, "threads", c.threads, "config");
  if (j.contains("synth")) detail::read_synth(j.at("synth"), c);
  if (j.contains("encoder")) {
    reject_unknown_keys(j.at("encoder"), {"patch_t", "patch_f", "depth", "dim", "heads", "mlp_dim", "head_dims"},
                        "encoder");
    from_json(j.at("encoder"), c.encoder);
  }
  c.encoder.t_len = c.synth.t_len;
  c.encoder.f_len = c.synth.f_len;
  if (j.contains("pretrain")) detail::read_pretrain(j.at("pretrain"), c.pretrain);
  if (j.contains("tune")) detail::read_tune(j.at("tune"), c.tune);
  if (j.contains("eval")) detail::read_eval(j.at("eval"), c.eval);
  if (j.contains("paths")) detail::read_paths(j.at("paths"), c.paths);
  return c;
}

inline RunConfig parse_config(const std::string& text, const std::string& source = "<config>") {
  return config_from_json(detail::parse_json(text, source, ErrorKind::Config));
}

inline RunConfig load_config(const std::filesystem::path& path) {
  return parse_config(detail::read_text_file(path), path.string());
}

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json sig;
  if (c.signature == "custom") {
    sig = nlohmann::json::array();
    for (const auto& cls : c.synth.class_signature) {
      nlohmann::json rs = nlohmann::json::array();
      for (const auto& r : cls) rs.push_back({{"bin", r.bin}, {"rate", r.rate}});
      sig.push_back(rs);
    }
  } else {
    sig = c.signature;
  }
  nlohmann::json enc = to_json(c.encoder);
  enc.erase("t_len");
  enc.erase("f_len");
  nlohmann::json eval = {{"way", c.eval.way},
                         {"shot", c.eval.shot},
                         {"query_per_class", c.eval.query_per_class},
                         {"episodes", c.eval.episodes}};
  if (c.eval.seed) eval["seed"] = *c.eval.seed;
  const auto& s = c.synth;
  const auto& t = c.tune;
  return {{"seed", c.seed},
          {"threads", c.threads},
          {"synth",
           {{"n_classes", s.n_classes},
            {"per_class", s.per_class},
            {"t_len", s.t_len},
            {"f_len", s.f_len},
            {"noise_sigma", s.noise_sigma},
            {"gain_jitter", s.gain_jitter},
            {"distractors", s.distractors},
            {"distractor_gain", s.distractor_gain},
            {"transients", s.transients},
            {"transient_gain", s.transient_gain},
            {"transient_len", s.transient_len},
            {"signature", sig}}},
          {"encoder", enc},
          {"pretrain",
           {{"epochs", c.pretrain.epochs},
            {"lr", c.pretrain.lr},
            {"batch", c.pretrain.batch},
            {"mask_ratio", c.pretrain.mask_ratio}}},
          {"tune",
           {{"stage1_epochs", t.stage1_epochs},
            {"stage1_lr", t.stage1_lr},
            {"stage1_batch", t.stage1_batch},
            {"stage2_epochs", t.stage2_epochs},
            {"stage2_lr", t.stage2_lr},
            {"stage2_batch", t.stage2_batch},
            {"llrd_factor", t.llrd_factor},
            {"tau", t.tau},
            {"k", t.k},
            {"queue_capacity", t.queue_capacity},
            {"mix", to_string(t.mix.mode)},
            {"alpha", t.mix.alpha},
            {"momentum", t.momentum},
            {"warmup_fraction", t.warmup_fraction}}},
          {"eval", eval},
          {"paths",
           {{"data", c.paths.data},
            {"pretrain_ckpt", c.paths.pretrain_ckpt},
            {"tune_dir", c.paths.tune_dir},
            {"report", c.paths.report},
            {"embeddings", c.paths.embeddings}}}};
}

}  // namespace uamix
