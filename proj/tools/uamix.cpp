#include <cstdio>
#include <exception>
#include <functional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "uamix/pipeline.hpp"

using namespace uamix;

namespace {

// Flags are bound to a defaults-initialized RunConfig so --help shows the
// defaults. Only flags given on the command line override the config file.
struct Overrides {
  RunConfig flags;
  std::vector<std::pair<CLI::Option*, std::function<void(RunConfig&)>>> list;

  template <class Get>
  CLI::Option* add(CLI::App* app, const std::string& name, Get get, const std::string& desc) {
    auto* target = &get(flags);
    auto* opt = app->add_option(name, *target, desc)->capture_default_str();
    list.emplace_back(opt, [get, target](RunConfig& c) { get(c) = *target; });
    return opt;
  }

  void apply(RunConfig& c) const {
    for (const auto& [opt, fn] : list)
      if (opt->count() > 0) fn(c);
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"uamix: T-CutMix contrastive tuning of masked-audio encoders with few-shot evaluation"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", "uamix 1.0");

  std::string config_path;
  app.add_option("-c,--config", config_path, "JSON run configuration (flags override its values)");
  Overrides ov;
  ov.add(&app, "--seed", [](RunConfig& c) -> auto& { return c.seed; }, "Master seed");
  ov.add(&app, "--threads", [](RunConfig& c) -> auto& { return c.threads; }, "Worker threads (results do not depend on it)")
      ->check(CLI::PositiveNumber);

  auto* synth = app.add_subcommand("synth", "Generate the synthetic labeled dataset");
  ov.add(synth, "-o,--out", [](RunConfig& c) -> auto& { return c.paths.data; }, "Dataset manifest to write");
  ov.add(synth, "--classes", [](RunConfig& c) -> auto& { return c.synth.n_classes; }, "Number of classes");
  ov.add(synth, "--per-class", [](RunConfig& c) -> auto& { return c.synth.per_class; }, "Items per class");
  ov.add(synth, "--t-len", [](RunConfig& c) -> auto& { return c.synth.t_len; }, "Frames per item");
  ov.add(synth, "--f-len", [](RunConfig& c) -> auto& { return c.synth.f_len; }, "Frequency bins per item");
  ov.add(synth, "--noise", [](RunConfig& c) -> auto& { return c.synth.noise_sigma; }, "Additive Gaussian noise scale");
  ov.add(synth, "--signature", [](RunConfig& c) -> auto& { return c.signature; }, "Class signatures")
      ->check(CLI::IsMember({"default", "disjoint"}));

  auto* ingest = app.add_subcommand("ingest", "Build a dataset from 16-bit mono WAV files");
  std::vector<std::string> wavs;
  std::vector<int> wav_labels;
  FbankOptions fb;
  std::string ingest_out = "data/audio.json";
  ingest->add_option("wav", wavs, "Input WAV files")->required();
  ingest->add_option("--labels", wav_labels, "One class id per file");
  ingest->add_option("--n-mels", fb.n_mels, "Mel bins")->capture_default_str();
  ingest->add_option("--win", fb.win_len, "Window length in samples")->capture_default_str();
  ingest->add_option("--hop", fb.hop_len, "Hop length in samples")->capture_default_str();
  ingest->add_option("-o,--out", ingest_out, "Dataset manifest to write")->capture_default_str();

  auto* pretrain = app.add_subcommand("pretrain", "Masked-reconstruction pretraining of the encoder");
  std::string resume, pretrain_log;
  ov.add(pretrain, "-d,--data", [](RunConfig& c) -> auto& { return c.paths.data; }, "Dataset manifest");
  ov.add(pretrain, "-o,--out", [](RunConfig& c) -> auto& { return c.paths.pretrain_ckpt; }, "Checkpoint to write");
  pretrain->add_option("--resume", resume, "Continue from this pretraining checkpoint");
  pretrain->add_option("--log", pretrain_log, "Per-epoch loss CSV");
  ov.add(pretrain, "--epochs", [](RunConfig& c) -> auto& { return c.pretrain.epochs; }, "Total epochs");
  ov.add(pretrain, "--lr", [](RunConfig& c) -> auto& { return c.pretrain.lr; }, "Adam learning rate");
  ov.add(pretrain, "--batch", [](RunConfig& c) -> auto& { return c.pretrain.batch; }, "Batch size");
  ov.add(pretrain, "--mask-ratio", [](RunConfig& c) -> auto& { return c.pretrain.mask_ratio; }, "Masked patch fraction");
  ov.add(pretrain, "--depth", [](RunConfig& c) -> auto& { return c.encoder.depth; }, "Transformer blocks");
  ov.add(pretrain, "--dim", [](RunConfig& c) -> auto& { return c.encoder.dim; }, "Embedding width");
  ov.add(pretrain, "--heads", [](RunConfig& c) -> auto& { return c.encoder.heads; }, "Attention heads");

  auto* tune = app.add_subcommand("tune", "Two-stage contrastive tuning (head, then top half)");
  std::string mix = to_string(ov.flags.tune.mix.mode);
  ov.add(tune, "-d,--data", [](RunConfig& c) -> auto& { return c.paths.data; }, "Dataset manifest");
  ov.add(tune, "-i,--in", [](RunConfig& c) -> auto& { return c.paths.pretrain_ckpt; }, "Pretrained checkpoint");
  ov.add(tune, "-o,--out-dir", [](RunConfig& c) -> auto& { return c.paths.tune_dir; }, "Output directory");
  auto* mix_opt = tune->add_option("--mix", mix, "Mixing used for the anchors")
                      ->check(CLI::IsMember({"t_cutmix", "tf_cutmix", "mixup", "none"}))
                      ->capture_default_str();
  ov.add(tune, "--alpha", [](RunConfig& c) -> auto& { return c.tune.mix.alpha; }, "Beta(alpha, alpha) mixing prior");
  ov.add(tune, "--stage1-epochs", [](RunConfig& c) -> auto& { return c.tune.stage1_epochs; }, "Head-only epochs");
  ov.add(tune, "--stage1-lr", [](RunConfig& c) -> auto& { return c.tune.stage1_lr; }, "Head-only learning rate");
  ov.add(tune, "--stage1-batch", [](RunConfig& c) -> auto& { return c.tune.stage1_batch; }, "Head-only batch size");
  ov.add(tune, "--stage2-epochs", [](RunConfig& c) -> auto& { return c.tune.stage2_epochs; }, "Top-half epochs");
  ov.add(tune, "--stage2-lr", [](RunConfig& c) -> auto& { return c.tune.stage2_lr; }, "Top-half base learning rate");
  ov.add(tune, "--stage2-batch", [](RunConfig& c) -> auto& { return c.tune.stage2_batch; }, "Top-half batch size");
  ov.add(tune, "--llrd", [](RunConfig& c) -> auto& { return c.tune.llrd_factor; }, "Layer-wise learning-rate decay");
  ov.add(tune, "--tau", [](RunConfig& c) -> auto& { return c.tune.tau; }, "Softmax temperature");
  ov.add(tune, "--k", [](RunConfig& c) -> auto& { return c.tune.k; }, "Nearest neighbours averaged per lookup");
  ov.add(tune, "--queue", [](RunConfig& c) -> auto& { return c.tune.queue_capacity; }, "Support queue capacity");

  auto* eval = app.add_subcommand("eval", "N-way K-shot nearest-centroid evaluation");
  std::string features = "encoder", ckpt_eval;
  ov.add(eval, "-d,--data", [](RunConfig& c) -> auto& { return c.paths.data; }, "Dataset manifest");
  eval->add_option("--ckpt", ckpt_eval, "Encoder checkpoint (default: <tune-dir>/stage2.ckpt)");
  eval->add_option("--features", features, "Feature source")
      ->check(CLI::IsMember({"encoder", "oracle", "random"}))
      ->capture_default_str();
  ov.add(eval, "--way", [](RunConfig& c) -> auto& { return c.eval.way; }, "Classes per episode");
  ov.add(eval, "--shot", [](RunConfig& c) -> auto& { return c.eval.shot; }, "Support items per class");
  ov.add(eval, "--query", [](RunConfig& c) -> auto& { return c.eval.query_per_class; }, "Query items per class");
  ov.add(eval, "--episodes", [](RunConfig& c) -> auto& { return c.eval.episodes; }, "Episodes");
  std::uint64_t eval_seed = 0;
  auto* eval_seed_opt = eval->add_option("--eval-seed", eval_seed, "Episode seed (default: --seed)");
  ov.add(eval, "-r,--report", [](RunConfig& c) -> auto& { return c.paths.report; }, "JSON report to write");

  auto* exp = app.add_subcommand("export-embeddings", "Write backbone features as CSV");
  std::string ckpt_exp;
  ov.add(exp, "-d,--data", [](RunConfig& c) -> auto& { return c.paths.data; }, "Dataset manifest");
  exp->add_option("--ckpt", ckpt_exp, "Encoder checkpoint (default: <tune-dir>/stage2.ckpt)");
  ov.add(exp, "-o,--out", [](RunConfig& c) -> auto& { return c.paths.embeddings; }, "CSV to write");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    RunConfig cfg = config_path.empty() ? RunConfig{} : load_config(config_path);
    ov.apply(cfg);
    cfg.encoder.t_len = cfg.synth.t_len;
    cfg.encoder.f_len = cfg.synth.f_len;
    if (mix_opt->count() > 0) cfg.tune.mix.mode = parse_mix_mode(mix);
    if (eval_seed_opt->count() > 0) cfg.eval.seed = eval_seed;
    const std::filesystem::path default_ckpt = std::filesystem::path(cfg.paths.tune_dir) / "stage2.ckpt";

    if (synth->parsed()) {
      const auto ds = cmd_synth(cfg, cfg.paths.data);
      std::printf("wrote %zu items (%zux%zu) to %s\n", ds.size(), ds.t_len, ds.f_len, cfg.paths.data.c_str());
    } else if (ingest->parsed()) {
      std::vector<std::filesystem::path> paths(wavs.begin(), wavs.end());
      const auto ds = cmd_ingest(paths, wav_labels, fb, ingest_out);
      std::printf("wrote %zu items (%zux%zu) to %s\n", ds.size(), ds.t_len, ds.f_len, ingest_out.c_str());
    } else if (pretrain->parsed()) {
      const auto r = cmd_pretrain(cfg, cfg.paths.data, cfg.paths.pretrain_ckpt, resume, pretrain_log);
      if (!r.epoch_losses.empty())
        std::printf("pretrain: %zu epochs, loss %.6f -> %.6f\n", r.epoch_losses.size(), r.epoch_losses.front(),
                    r.epoch_losses.back());
      else
        std::printf("pretrain: already at %zu epochs\n", cfg.pretrain.epochs);
      std::printf("wrote %s\n", cfg.paths.pretrain_ckpt.c_str());
    } else if (tune->parsed()) {
      const auto r = cmd_tune(cfg, cfg.paths.data, cfg.paths.pretrain_ckpt, cfg.paths.tune_dir);
      std::printf("tune (%s): stage 1 loss %.4f -> %.4f, stage 2 loss %.4f -> %.4f\n",
                  to_string(cfg.tune.mix.mode).c_str(), r.stage1.epochs.front().mean_loss,
                  r.stage1.epochs.back().mean_loss, r.stage2.epochs.front().mean_loss, r.stage2.epochs.back().mean_loss);
      std::printf("wrote %s\n", cfg.paths.tune_dir.c_str());
    } else if (eval->parsed()) {
      const auto rep = cmd_eval(cfg, cfg.paths.data, ckpt_eval.empty() ? default_ckpt : std::filesystem::path(ckpt_eval),
                                parse_feature_source(features), cfg.paths.report);
      std::printf("%s\n", rep.summary().c_str());
    } else if (exp->parsed()) {
      cmd_export_embeddings(cfg, cfg.paths.data, ckpt_exp.empty() ? default_ckpt : std::filesystem::path(ckpt_exp), cfg.paths.embeddings);
      std::printf("wrote %s\n", cfg.paths.embeddings.c_str());
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "uamix: %s: %s\n", to_string(e.kind()), e.what());
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "uamix: %s\n", e.what());
    return 3;
  }
  return 0;
}
