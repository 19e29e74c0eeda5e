#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "uamix/dataset.hpp"
#include "uamix/encoder.hpp"
#include "uamix/error.hpp"
#include "uamix/mixing.hpp"
#include "uamix/objective.hpp"
#include "uamix/optim.hpp"
#include "uamix/parallel.hpp"
#include "uamix/random.hpp"

namespace uamix {

// ---------------------------------------------------------------------------
// Configuration

struct PretrainConfig {
  std::size_t epochs = 20;
  double lr = 1e-3;
  std::size_t batch = 32;
  double mask_ratio = 0.75;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

/// Desk-scale defaults. Full-scale reference values: 40 head epochs at batch
/// 512, then 160 top-half epochs at batch 128, both at lr 1e-4.
struct TuneConfig {
  std::size_t stage1_epochs = 10;
  double stage1_lr = 1e-4;
  std::size_t stage1_batch = 32;
  std::size_t stage2_epochs = 40;
  double stage2_lr = 1e-4;
  std::size_t stage2_batch = 32;
  double llrd_factor = 0.65;
  double tau = 0.15;
  std::size_t k = 1;
  std::size_t queue_capacity = 1024;
  MixParams mix;
  std::uint64_t seed = 0;
  double momentum = 0.9;
  double warmup_fraction = 0.05;
  std::size_t threads = 1;
};

inline void validate(const PretrainConfig& c) {
  require(c.epochs >= 1 && c.batch >= 1, ErrorKind::Config, "pretrain epochs and batch must be >= 1");
  require(c.lr > 0.0, ErrorKind::Config, "pretrain lr must be > 0");
  require(c.mask_ratio > 0.0 && c.mask_ratio < 1.0, ErrorKind::Config, "mask_ratio must be in (0, 1)");
}

inline void validate(const TuneConfig& c) {
  require(c.stage1_epochs >= 1 && c.stage2_epochs >= 1, ErrorKind::Config, "epoch counts must be >= 1");
  require(c.stage1_batch >= 2 && c.stage2_batch >= 2, ErrorKind::Config, "batch sizes must be >= 2");
  require(c.stage1_lr > 0.0 && c.stage2_lr > 0.0, ErrorKind::Config, "learning rates must be > 0");
  require(c.llrd_factor > 0.0 && c.llrd_factor <= 1.0, ErrorKind::Config, "llrd_factor must be in (0, 1]");
  require(c.tau > 0.0, ErrorKind::Config, "tau must be > 0");
  require(c.k >= 1, ErrorKind::Config, "k must be >= 1");
  require(c.queue_capacity >= c.k, ErrorKind::Config, "queue_capacity must be >= k");
  require(c.mix.alpha > 0.0, ErrorKind::Config, "alpha must be > 0");
  require(c.momentum >= 0.0 && c.momentum < 1.0, ErrorKind::Config, "momentum must be in [0, 1)");
  require(c.warmup_fraction >= 0.0 && c.warmup_fraction < 1.0, ErrorKind::Config, "warmup_fraction must be in [0, 1)");
}

// ---------------------------------------------------------------------------
// Layer-wise learning-rate decay

struct LayerRates {
  double head = 0.0;
  double embed = 0.0;
  std::vector<double> blocks;  // indexed bottom (0) to top (L-1)

  /// Block rates from the top block down.
  std::vector<double> top_down() const { return {blocks.rbegin(), blocks.rend()}; }

  double rate(const Group& g) const {
    switch (g.kind) {
      case GroupKind::Embed: return embed;
      case GroupKind::Block: return blocks.at(g.index);
      case GroupKind::Head:
      case GroupKind::Mae: return head;
    }
    return 0.0;
  }

  LayerRates scaled(double factor) const {
    LayerRates out = *this;
    out.head *= factor;
    out.embed *= factor;
    for (auto& b : out.blocks) b *= factor;
    return out;
  }
};

/// Head and top block get `base_lr`; the block t levels below the top gets
/// base_lr * gamma^t. Embeddings sit one level below the bottom block.
inline LayerRates llrd_rates(double base_lr, double gamma, std::size_t depth) {
  require(gamma > 0.0 && gamma <= 1.0, ErrorKind::Parameter, "decay factor must be in (0, 1]");
  require(depth >= 1, ErrorKind::Parameter, "depth must be >= 1");
  LayerRates r;
  r.head = base_lr;
  r.blocks.resize(depth);
  double rate = base_lr;
  for (std::size_t t = 0; t < depth; ++t) {
    r.blocks[depth - 1 - t] = rate;
    rate *= gamma;
  }
  r.embed = rate;
  return r;
}

inline LayerRates uniform_rates(double lr, std::size_t depth) { return llrd_rates(lr, 1.0, depth); }

// ---------------------------------------------------------------------------
// Run log

struct StepRecord {
  std::uint64_t step = 0;
  int stage = 0;
  std::size_t epoch = 0;
  double loss = 0.0;
  double lr_head = 0.0;
  std::vector<double> lr_blocks;  // applied rate per block, 0 when frozen
};

struct EpochSummary {
  int stage = 0;
  std::size_t epoch = 0;
  double mean_loss = 0.0;
};

struct RunLog {
  std::vector<StepRecord> steps;
  std::vector<EpochSummary> epochs;

  void append(const RunLog& other) {
    steps.insert(steps.end(), other.steps.begin(), other.steps.end());
    epochs.insert(epochs.end(), other.epochs.begin(), other.epochs.end());
  }

  friend bool operator==(const RunLog& a, const RunLog& b) { return a.to_csv() == b.to_csv(); }

  /// Columns: step, stage, epoch, loss, lr_head, lr_block_0 .. lr_block_{L-1}.
  std::string to_csv() const {
    std::ostringstream out;
    out << std::setprecision(17);
    const std::size_t n_blocks = steps.empty() ? 0 : steps.front().lr_blocks.size();
    out << "step,stage,epoch,loss,lr_head";
    for (std::size_t b = 0; b < n_blocks; ++b) out << ",lr_block_" << b;
    out << '\n';
    for (const auto& s : steps) {
      out << s.step << ',' << s.stage << ',' << s.epoch << ',' << s.loss << ',' << s.lr_head;
      for (double r : s.lr_blocks) out << ',' << r;
      out << '\n';
    }
    return out.str();
  }

  void write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    require(bool(out), ErrorKind::Io, "cannot write " + path.string());
    out << to_csv();
    out.close();
    require(!out.fail(), ErrorKind::Io, "write failed: " + path.string());
  }
};

// ---------------------------------------------------------------------------
// Shared step machinery

namespace detail {

/// Batches for one epoch: a seeded shuffle cut into chunks of `batch`;
/// a trailing chunk smaller than `min_size` is dropped.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch, std::size_t min_size,
                                                           Rng& rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  shuffle(order, rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < n; s += batch) {
    const std::size_t e = std::min(n, s + batch);
    if (e - s < min_size) break;
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s), order.begin() + static_cast<std::ptrdiff_t>(e));
  }
  return out;
}

inline std::size_t batches_per_epoch(std::size_t n, std::size_t batch, std::size_t min_size) {
  const std::size_t full = n / batch;
  return full + ((n % batch) >= min_size && (n % batch) > 0 ? 1 : 0);
}

/// Sums per-example gradients in index order.
template <class S>
EncoderParams<S> reduce_grads(const EncoderConfig& cfg, std::vector<EncoderParams<S>>& per_example) {
  EncoderParams<S> total = zero_params<S>(cfg);
  auto dst = tensors(total);
  for (auto& g : per_example) {
    auto src = tensors(g);
    for (std::size_t t = 0; t < dst.size(); ++t) add_inplace(*dst[t].tensor, *src[t].tensor);
  }
  return total;
}

template <class S>
void scale_grads(EncoderParams<S>& g, S factor) {
  for (auto& t : tensors(g))
    for (auto& v : t.tensor->storage()) v *= factor;
}

inline void check_finite(double loss, const std::string& where) {
  require(std::isfinite(loss), ErrorKind::Numerical, "non-finite loss in " + where);
}

}  // namespace detail

/// Projected embeddings of `items` (rows in input order).
template <class S>
Matrix<S> project_all(const EncoderState<S>& st, const std::vector<const Fbank*>& items, std::size_t threads) {
  Matrix<S> out(items.size(), st.config.out_dim());
  parallel_for(items.size(), threads, [&](std::size_t i) {
    const auto r = forward(st, *items[i]);
    std::copy(r.projected.begin(), r.projected.end(), out.row(i).begin());
  });
  return out;
}

/// Pooled backbone features of every dataset item, L2-normalized.
template <class S>
Matrix<double> backbone_features(const EncoderState<S>& st, const Dataset& ds, std::size_t threads = 1) {
  Matrix<double> out(ds.size(), st.config.dim);
  parallel_for(ds.size(), threads, [&](std::size_t i) {
    const auto r = forward(st, ds.items[i]);
    std::vector<double> v(r.pooled.begin(), r.pooled.end());
    const auto n = normalized<double>(v);
    std::copy(n.begin(), n.end(), out.row(i).begin());
  });
  return out;
}

// ---------------------------------------------------------------------------
// Masked-patch pretraining

/// One Adam step of masked reconstruction on `batch`; returns the batch-mean
/// loss. Masks are drawn from `rng` in batch order.
template <class S>
double mae_pretrain_step(EncoderState<S>& st, const std::vector<const Fbank*>& batch, double mask_ratio, Rng& rng,
                         Adam<S>& opt, double lr, std::size_t threads = 1) {
  require(!batch.empty(), ErrorKind::Size, "empty batch");
  std::vector<std::vector<bool>> masks;
  masks.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) masks.push_back(sample_token_mask(st.config.n_tokens(), mask_ratio, rng));
  std::vector<EncoderParams<S>> grads(batch.size());
  std::vector<double> losses(batch.size());
  parallel_for(batch.size(), threads, [&](std::size_t i) {
    grads[i] = zero_params<S>(st.config);
    losses[i] = static_cast<double>(mae_loss(st, *batch[i], masks[i], &grads[i]));
  });
  double loss = 0.0;
  for (double l : losses) loss += l;
  loss /= static_cast<double>(batch.size());
  detail::check_finite(loss, "masked reconstruction");
  auto total = detail::reduce_grads(st.config, grads);
  detail::scale_grads(total, static_cast<S>(1.0 / static_cast<double>(batch.size())));
  opt.step(st, total, [lr](const Group&) { return lr; });
  ++st.step;
  return loss;
}

/// Runs masked-reconstruction epochs until `cfg.epochs` total epochs have been
/// completed (a resumed state continues from its stored step). Returns the
/// mean loss of each epoch run here.
template <class S>
std::vector<double> run_pretrain(EncoderState<S>& st, const Dataset& ds, const PretrainConfig& cfg) {
  validate(cfg);
  require(ds.size() >= 1, ErrorKind::Size, "empty dataset");
  require(st.stage == Stage::Init || st.stage == Stage::Mae, ErrorKind::State,
          "pretraining applies only to fresh or pretrained states");
  set_trainable(st, Trainability::MaePretrain);
  const std::size_t per_epoch = detail::batches_per_epoch(ds.size(), cfg.batch, 1);
  const std::size_t start_epoch = static_cast<std::size_t>(st.step / per_epoch);
  Adam<S> opt(st.config);
  std::vector<double> epoch_losses;
  for (std::size_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    Rng rng = make_rng(cfg.seed, 0x3AE, epoch);
    double sum = 0.0;
    const auto batches = detail::epoch_batches(ds.size(), cfg.batch, 1, rng);
    for (const auto& idx : batches) {
      std::vector<const Fbank*> batch;
      for (auto i : idx) batch.push_back(&ds.items[i]);
      sum += mae_pretrain_step(st, batch, cfg.mask_ratio, rng, opt, cfg.lr, cfg.threads);
    }
    epoch_losses.push_back(sum / static_cast<double>(batches.size()));
  }
  st.stage = Stage::Mae;
  return epoch_losses;
}

// ---------------------------------------------------------------------------
// Contrastive tuning

/// Fills the queue with one forward-only pass over the dataset.
template <class S>
void warm_up_queue(const EncoderState<S>& st, const Dataset& ds, SupportQueue<S>& queue, std::size_t threads) {
  std::vector<const Fbank*> items;
  for (const auto& e : ds.items) items.push_back(&e);
  queue.push(project_all(st, items, threads));
}

/// One optimization step: mix the batch, embed mixed anchors and original
/// positives, apply the smoothed NNCLR loss, update trainable groups, then
/// push the positive embeddings into the queue.
template <class S>
double contrastive_step(EncoderState<S>& st, const std::vector<const Fbank*>& batch, const TuneConfig& cfg,
                        SupportQueue<S>& queue, Rng& rng, SgdMomentum<S>& opt, const LayerRates& rates) {
  const std::size_t n = batch.size(), d = st.config.out_dim();
  const auto pairs = mix_batch(batch, cfg.mix, rng);

  ContrastiveBatch<S> cb;
  cb.tau = cfg.tau;
  cb.z = Matrix<S>(n, d);
  cb.z_pos = Matrix<S>(n, d);
  cb.y = Matrix<double>(n, n);
  std::vector<ForwardCache<S>> caches(n);
  parallel_for(n, cfg.threads, [&](std::size_t i) {
    const auto anchor = forward(st, pairs[i].m);
    std::copy(anchor.projected.begin(), anchor.projected.end(), cb.z.row(i).begin());
    const auto pos = forward(st, *batch[i], &caches[i]);
    std::copy(pos.projected.begin(), pos.projected.end(), cb.z_pos.row(i).begin());
  });
  for (std::size_t i = 0; i < n; ++i) std::copy(pairs[i].y.begin(), pairs[i].y.end(), cb.y.row(i).begin());

  const auto res = mixed_loss(cb, queue, cfg.k);
  detail::check_finite(res.loss, "contrastive loss");

  std::vector<EncoderParams<S>> grads(n);
  parallel_for(n, cfg.threads, [&](std::size_t i) {
    grads[i] = zero_params<S>(st.config);
    Upstream<S> up;
    up.d_projected.assign(res.grad_z_pos.row(i).begin(), res.grad_z_pos.row(i).end());
    backward(st, caches[i], up, grads[i]);
  });
  const auto total = detail::reduce_grads(st.config, grads);
  opt.step(st, total, [&rates](const Group& g) { return rates.rate(g); });
  ++st.step;
  queue.push(cb.z_pos);
  return res.loss;
}

namespace detail {

template <class S>
RunLog run_contrastive_stage(EncoderState<S>& st, const Dataset& ds, const TuneConfig& cfg, int stage_id,
                             std::size_t epochs, std::size_t batch_size, const LayerRates& base_rates) {
  const std::size_t per_epoch = batches_per_epoch(ds.size(), batch_size, 2);
  require(per_epoch >= 1, ErrorKind::Size, "dataset too small for one batch");
  const std::size_t total = epochs * per_epoch;
  const auto warmup = static_cast<std::size_t>(std::ceil(cfg.warmup_fraction * static_cast<double>(total)));

  SupportQueue<S> queue(cfg.queue_capacity, st.config.out_dim());
  warm_up_queue(st, ds, queue, cfg.threads);
  require(queue.size() >= cfg.k, ErrorKind::State, "queue holds fewer than k entries after warm-up");
  SgdMomentum<S> opt(st.config, cfg.momentum);
  Rng rng = make_rng(cfg.seed, 0xC0 + static_cast<std::uint64_t>(stage_id));

  RunLog log;
  std::size_t step_in_stage = 0;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    double sum = 0.0;
    const auto batches = epoch_batches(ds.size(), batch_size, 2, rng);
    for (const auto& idx : batches) {
      const LayerRates rates = base_rates.scaled(warmup_cosine(step_in_stage, total, warmup));
      std::vector<const Fbank*> batch;
      for (auto i : idx) batch.push_back(&ds.items[i]);
      StepRecord rec;
      rec.step = st.step;
      rec.stage = stage_id;
      rec.epoch = epoch;
      rec.loss = contrastive_step(st, batch, cfg, queue, rng, opt, rates);
      rec.lr_head = st.head_trainable() ? rates.head : 0.0;
      for (std::size_t b = 0; b < st.config.depth; ++b)
        rec.lr_blocks.push_back(st.block_trainable(b) ? rates.blocks[b] : 0.0);
      sum += rec.loss;
      log.steps.push_back(std::move(rec));
      ++step_in_stage;
    }
    log.epochs.push_back({stage_id, epoch, sum / static_cast<double>(batches.size())});
  }
  return log;
}

}  // namespace detail

/// Trains the projection head on a frozen encoder.
template <class S>
RunLog run_stage1(EncoderState<S>& st, const Dataset& ds, const TuneConfig& cfg) {
  validate(cfg);
  require(st.stage == Stage::Init || st.stage == Stage::Mae, ErrorKind::State,
          "stage 1 expects a fresh or pretrained encoder, got stage '" + to_string(st.stage) + "'");
  set_trainable(st, Trainability::HeadOnly);
  auto log = detail::run_contrastive_stage(st, ds, cfg, 1, cfg.stage1_epochs, cfg.stage1_batch,
                                           uniform_rates(cfg.stage1_lr, st.config.depth));
  st.stage = Stage::Stage1;
  return log;
}

/// Retrains the top half of the encoder with the head, using layer-wise decay.
template <class S>
RunLog run_stage2(EncoderState<S>& st, const Dataset& ds, const TuneConfig& cfg) {
  validate(cfg);
  require(st.stage == Stage::Stage1, ErrorKind::State,
          "stage 2 requires a stage-1 state, got stage '" + to_string(st.stage) + "'");
  set_trainable(st, Trainability::TopHalf);
  auto log = detail::run_contrastive_stage(st, ds, cfg, 2, cfg.stage2_epochs, cfg.stage2_batch,
                                           llrd_rates(cfg.stage2_lr, cfg.llrd_factor, st.config.depth));
  st.stage = Stage::Stage2;
  return log;
}

}  // namespace uamix
