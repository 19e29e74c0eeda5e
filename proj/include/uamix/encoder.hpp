#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "uamix/dataset.hpp"
#include "uamix/error.hpp"
#include "uamix/matrix.hpp"
#include "uamix/random.hpp"

namespace uamix {

struct EncoderConfig {
  std::size_t t_len = 64;
  std::size_t f_len = 8;
  std::size_t patch_t = 8;
  std::size_t patch_f = 8;
  std::size_t depth = 2;
  std::size_t dim = 32;
  std::size_t heads = 4;
  std::size_t mlp_dim = 64;
  /// Projection-head layer widths; the last entry is the embedding size.
  std::vector<std::size_t> head_dims = {64, 32};

  std::size_t n_tokens() const { return (t_len / patch_t) * (f_len / patch_f); }
  std::size_t patch_size() const { return patch_t * patch_f; }
  std::size_t head_dim() const { return dim / heads; }
  std::size_t out_dim() const { return head_dims.back(); }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

inline void validate(const EncoderConfig& c) {
  require(c.patch_t >= 1 && c.patch_f >= 1, ErrorKind::Config, "patch sizes must be >= 1");
  require(c.t_len % c.patch_t == 0 && c.f_len % c.patch_f == 0, ErrorKind::Shape,
          "input dimensions must be divisible by the patch size");
  require(c.t_len >= c.patch_t && c.f_len >= c.patch_f, ErrorKind::Shape, "input smaller than one patch");
  require(c.depth >= 2, ErrorKind::Config, "depth must be >= 2");
  require(c.heads >= 1 && c.dim % c.heads == 0, ErrorKind::Config, "dim must be divisible by heads");
  require(c.mlp_dim >= 1, ErrorKind::Config, "mlp_dim must be >= 1");
  require(!c.head_dims.empty(), ErrorKind::Config, "head_dims must not be empty");
  for (auto d : c.head_dims) require(d >= 1, ErrorKind::Config, "head widths must be >= 1");
}

/// Parameter groups. Trainability and learning rates are set per group.
enum class GroupKind { Embed, Block, Head, Mae };

struct Group {
  GroupKind kind = GroupKind::Embed;
  std::size_t index = 0;  // block index for GroupKind::Block

  std::string name() const {
    switch (kind) {
      case GroupKind::Embed: return "embed";
      case GroupKind::Block: return "block." + std::to_string(index);
      case GroupKind::Head: return "head";
      case GroupKind::Mae: return "mae";
    }
    return "?";
  }
  friend bool operator==(const Group&, const Group&) = default;
};

template <class S>
struct BlockParams {
  Matrix<S> ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b;
  Matrix<S> ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
};

template <class S>
struct EncoderParams {
  Matrix<S> patch_w, patch_b, pos;
  std::vector<BlockParams<S>> blocks;
  std::vector<Matrix<S>> head_w, head_b;
  Matrix<S> mask_token, recon_w, recon_b;
};

template <class S>
struct TensorRef {
  std::string name;
  Group group;
  Matrix<S>* tensor;
};

/// Every tensor in a fixed order, with its name and group.
template <class S>
std::vector<TensorRef<S>> tensors(EncoderParams<S>& p) {
  std::vector<TensorRef<S>> out;
  const Group embed{GroupKind::Embed, 0};
  out.push_back({"patch_w", embed, &p.patch_w});
  out.push_back({"patch_b", embed, &p.patch_b});
  out.push_back({"pos", embed, &p.pos});
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    auto& b = p.blocks[i];
    const Group g{GroupKind::Block, i};
    const std::string pre = "block." + std::to_string(i) + ".";
    out.push_back({pre + "ln1_g", g, &b.ln1_g});
    out.push_back({pre + "ln1_b", g, &b.ln1_b});
    out.push_back({pre + "qkv_w", g, &b.qkv_w});
    out.push_back({pre + "qkv_b", g, &b.qkv_b});
    out.push_back({pre + "proj_w", g, &b.proj_w});
    out.push_back({pre + "proj_b", g, &b.proj_b});
    out.push_back({pre + "ln2_g", g, &b.ln2_g});
    out.push_back({pre + "ln2_b", g, &b.ln2_b});
    out.push_back({pre + "fc1_w", g, &b.fc1_w});
    out.push_back({pre + "fc1_b", g, &b.fc1_b});
    out.push_back({pre + "fc2_w", g, &b.fc2_w});
    out.push_back({pre + "fc2_b", g, &b.fc2_b});
  }
  const Group head{GroupKind::Head, 0};
  for (std::size_t i = 0; i < p.head_w.size(); ++i) {
    out.push_back({"head." + std::to_string(i) + ".w", head, &p.head_w[i]});
    out.push_back({"head." + std::to_string(i) + ".b", head, &p.head_b[i]});
  }
  const Group mae{GroupKind::Mae, 0};
  out.push_back({"mask_token", mae, &p.mask_token});
  out.push_back({"recon_w", mae, &p.recon_w});
  out.push_back({"recon_b", mae, &p.recon_b});
  return out;
}

template <class S>
std::vector<TensorRef<S>> tensors(const EncoderParams<S>& p) {
  return tensors(const_cast<EncoderParams<S>&>(p));
}

/// Zero-filled parameter set with the shapes of `cfg`.
template <class S>
EncoderParams<S> zero_params(const EncoderConfig& cfg) {
  EncoderParams<S> p;
  const std::size_t d = cfg.dim, dp = cfg.patch_size();
  p.patch_w = Matrix<S>(dp, d);
  p.patch_b = Matrix<S>(1, d);
  p.pos = Matrix<S>(cfg.n_tokens(), d);
  p.blocks.resize(cfg.depth);
  for (auto& b : p.blocks) {
    b.ln1_g = Matrix<S>(1, d);
    b.ln1_b = Matrix<S>(1, d);
    b.qkv_w = Matrix<S>(d, 3 * d);
    b.qkv_b = Matrix<S>(1, 3 * d);
    b.proj_w = Matrix<S>(d, d);
    b.proj_b = Matrix<S>(1, d);
    b.ln2_g = Matrix<S>(1, d);
    b.ln2_b = Matrix<S>(1, d);
    b.fc1_w = Matrix<S>(d, cfg.mlp_dim);
    b.fc1_b = Matrix<S>(1, cfg.mlp_dim);
    b.fc2_w = Matrix<S>(cfg.mlp_dim, d);
    b.fc2_b = Matrix<S>(1, d);
  }
  std::size_t in = d;
  for (std::size_t out : cfg.head_dims) {
    p.head_w.emplace_back(in, out);
    p.head_b.emplace_back(1, out);
    in = out;
  }
  p.mask_token = Matrix<S>(1, d);
  p.recon_w = Matrix<S>(d, dp);
  p.recon_b = Matrix<S>(1, dp);
  return p;
}

/// Tags recording how far a state has progressed through the pipeline.
enum class Stage { Init, Mae, Stage1, Stage2 };

inline std::string to_string(Stage s) {
  switch (s) {
    case Stage::Init: return "init";
    case Stage::Mae: return "mae";
    case Stage::Stage1: return "stage1";
    case Stage::Stage2: return "stage2";
  }
  return "?";
}

inline Stage parse_stage(const std::string& s) {
  if (s == "init") return Stage::Init;
  if (s == "mae") return Stage::Mae;
  if (s == "stage1") return Stage::Stage1;
  if (s == "stage2") return Stage::Stage2;
  fail(ErrorKind::Format, "unknown stage tag '" + s + "'");
}

enum class Trainability { All, MaePretrain, HeadOnly, TopHalf };

template <class S>
struct EncoderState {
  EncoderConfig config;
  EncoderParams<S> params;
  /// Indexed by group_slot().
  std::vector<bool> trainable;
  Stage stage = Stage::Init;
  std::uint64_t step = 0;

  std::size_t group_slot(const Group& g) const {
    switch (g.kind) {
      case GroupKind::Embed: return 0;
      case GroupKind::Block: return 1 + g.index;
      case GroupKind::Head: return 1 + config.depth;
      case GroupKind::Mae: return 2 + config.depth;
    }
    return 0;
  }
  std::size_t n_groups() const { return config.depth + 3; }
  bool is_trainable(const Group& g) const { return trainable[group_slot(g)]; }
  bool block_trainable(std::size_t i) const { return trainable[1 + i]; }
  bool embed_trainable() const { return trainable[0]; }
  bool head_trainable() const { return trainable[1 + config.depth]; }
  bool mae_trainable() const { return trainable[2 + config.depth]; }

  template <class T>
  EncoderState<T> cast() const {
    EncoderState<T> out;
    out.config = config;
    out.params = zero_params<T>(config);
    auto src = tensors(params);
    auto dst = tensors(out.params);
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i].tensor = src[i].tensor->template cast<T>();
    out.trainable = trainable;
    out.stage = stage;
    out.step = step;
    return out;
  }
};

/// Number of top blocks retrained in the TopHalf stage: ceil(L / 2).
inline std::size_t top_half_count(std::size_t depth) { return (depth + 1) / 2; }

template <class S>
void set_trainable(EncoderState<S>& st, Trainability mode) {
  const std::size_t depth = st.config.depth;
  st.trainable.assign(st.n_groups(), false);
  switch (mode) {
    case Trainability::All:
      st.trainable.assign(st.n_groups(), true);
      break;
    case Trainability::MaePretrain:
      st.trainable.assign(st.n_groups(), true);
      st.trainable[1 + depth] = false;
      break;
    case Trainability::HeadOnly:
      st.trainable[1 + depth] = true;
      break;
    case Trainability::TopHalf:
      st.trainable[1 + depth] = true;
      for (std::size_t i = depth - top_half_count(depth); i < depth; ++i) st.trainable[1 + i] = true;
      break;
  }
}

template <class S>
EncoderState<S> init_encoder(const EncoderConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  EncoderState<S> st;
  st.config = cfg;
  st.params = zero_params<S>(cfg);
  Rng rng = make_rng(seed, 0xE11C);
  auto xavier = [&](Matrix<S>& w) {
    const double sd = std::sqrt(2.0 / static_cast<double>(w.rows() + w.cols()));
    for (auto& v : w.storage()) v = static_cast<S>(normal(rng, 0.0, sd));
  };
  auto small = [&](Matrix<S>& w) {
    for (auto& v : w.storage()) v = static_cast<S>(normal(rng, 0.0, 0.02));
  };
  xavier(st.params.patch_w);
  small(st.params.pos);
  for (auto& b : st.params.blocks) {
    b.ln1_g.fill(S(1));
    b.ln2_g.fill(S(1));
    xavier(b.qkv_w);
    xavier(b.proj_w);
    xavier(b.fc1_w);
    xavier(b.fc2_w);
  }
  for (auto& w : st.params.head_w) xavier(w);
  small(st.params.mask_token);
  xavier(st.params.recon_w);
  set_trainable(st, Trainability::All);
  return st;
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace detail {

template <class S>
S gelu(S x) {
  return S(0.5) * x * (S(1) + std::erf(x * S(std::numbers::sqrt2 / 2.0)));
}

template <class S>
S gelu_grad(S x) {
  const S cdf = S(0.5) * (S(1) + std::erf(x * S(std::numbers::sqrt2 / 2.0)));
  const S pdf = std::exp(S(-0.5) * x * x) * S(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
  return cdf + x * pdf;
}

template <class S>
inline constexpr S kLayerNormEps = S(1e-5);

template <class S>
void layer_norm(const Matrix<S>& x, const Matrix<S>& g, const Matrix<S>& b, Matrix<S>& xhat, std::vector<S>& rstd,
                Matrix<S>& y) {
  const std::size_t n = x.rows(), d = x.cols();
  xhat = Matrix<S>(n, d);
  y = Matrix<S>(n, d);
  rstd.assign(n, S(0));
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = x.row(i);
    S mean = 0;
    for (S v : r) mean += v;
    mean /= S(d);
    S var = 0;
    for (S v : r) var += (v - mean) * (v - mean);
    var /= S(d);
    rstd[i] = S(1) / std::sqrt(var + kLayerNormEps<S>);
    for (std::size_t j = 0; j < d; ++j) {
      xhat(i, j) = (r[j] - mean) * rstd[i];
      y(i, j) = xhat(i, j) * g(0, j) + b(0, j);
    }
  }
}

/// Returns dx; accumulates dg, db when non-null.
template <class S>
Matrix<S> layer_norm_backward(const Matrix<S>& dy, const Matrix<S>& xhat, const std::vector<S>& rstd,
                              const Matrix<S>& g, Matrix<S>* dg, Matrix<S>* db) {
  const std::size_t n = dy.rows(), d = dy.cols();
  Matrix<S> dx(n, d);
  std::vector<S> dxhat(d);
  for (std::size_t i = 0; i < n; ++i) {
    S m1 = 0, m2 = 0;
    for (std::size_t j = 0; j < d; ++j) {
      if (dg) (*dg)(0, j) += dy(i, j) * xhat(i, j);
      if (db) (*db)(0, j) += dy(i, j);
      dxhat[j] = dy(i, j) * g(0, j);
      m1 += dxhat[j];
      m2 += dxhat[j] * xhat(i, j);
    }
    m1 /= S(d);
    m2 /= S(d);
    for (std::size_t j = 0; j < d; ++j) dx(i, j) = rstd[i] * (dxhat[j] - m1 - xhat(i, j) * m2);
  }
  return dx;
}

template <class S>
Matrix<S> linear(const Matrix<S>& x, const Matrix<S>& w, const Matrix<S>& b) {
  Matrix<S> y;
  matmul(x, w, y);
  add_row_bias(y, b);
  return y;
}

/// Returns dx; accumulates dw, db when non-null.
template <class S>
Matrix<S> linear_backward(const Matrix<S>& dy, const Matrix<S>& x, const Matrix<S>& w, Matrix<S>* dw, Matrix<S>* db,
                          bool need_dx = true) {
  if (dw) matmul_at_b_acc(x, dy, *dw);
  if (db) acc_col_sums(dy, *db);
  Matrix<S> dx;
  if (need_dx) matmul_a_bt(dy, w, dx);
  return dx;
}

}  // namespace detail

template <class S>
struct BlockCache {
  Matrix<S> x_in, xhat1, a, qkv, o, x_mid, xhat2, b, u, g;
  std::vector<S> rstd1, rstd2;
  std::vector<Matrix<S>> attn;  // per-head P×P softmax weights
};

template <class S>
struct ForwardCache {
  bool valid = false;
  Matrix<S> patches;
  std::vector<BlockCache<S>> blocks;
  Matrix<S> tokens;
  std::vector<Matrix<S>> head_in;   // input of each head layer
  std::vector<Matrix<S>> head_pre;  // pre-activation of each head layer
  std::vector<S> raw_out;           // head output before normalization
  S raw_norm = 0;
  std::vector<S> projected;
};

template <class S>
struct ForwardResult {
  Matrix<S> tokens;          // P × dim final-block output
  std::vector<S> pooled;     // mean over tokens
  std::vector<S> projected;  // L2-normalized head output
};

/// Splits a T×F input into P row-major patches of patch_t × patch_f values.
template <class S>
Matrix<S> extract_patches(const EncoderConfig& cfg, const Fbank& x) {
  require(x.rows() == cfg.t_len && x.cols() == cfg.f_len, ErrorKind::Shape,
          "input is " + std::to_string(x.rows()) + "x" + std::to_string(x.cols()) + ", encoder expects " +
              std::to_string(cfg.t_len) + "x" + std::to_string(cfg.f_len));
  const std::size_t nf = cfg.f_len / cfg.patch_f;
  Matrix<S> patches(cfg.n_tokens(), cfg.patch_size());
  for (std::size_t p = 0; p < cfg.n_tokens(); ++p) {
    const std::size_t t0 = (p / nf) * cfg.patch_t, f0 = (p % nf) * cfg.patch_f;
    for (std::size_t dt = 0; dt < cfg.patch_t; ++dt)
      for (std::size_t df = 0; df < cfg.patch_f; ++df)
        patches(p, dt * cfg.patch_f + df) = static_cast<S>(x(t0 + dt, f0 + df));
  }
  return patches;
}

namespace detail {

template <class S>
Matrix<S> block_forward(const EncoderConfig& cfg, const BlockParams<S>& bp, const Matrix<S>& x, BlockCache<S>& c) {
  const std::size_t n = x.rows(), d = cfg.dim, hd = cfg.head_dim();
  c.x_in = x;
  layer_norm(x, bp.ln1_g, bp.ln1_b, c.xhat1, c.rstd1, c.a);
  c.qkv = linear(c.a, bp.qkv_w, bp.qkv_b);
  c.o = Matrix<S>(n, d);
  c.attn.assign(cfg.heads, Matrix<S>(n, n));
  const S scale = S(1) / std::sqrt(S(hd));
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const std::size_t qo = h * hd, ko = d + h * hd, vo = 2 * d + h * hd;
    Matrix<S>& pm = c.attn[h];
    for (std::size_t i = 0; i < n; ++i) {
      S mx = -std::numeric_limits<S>::infinity();
      for (std::size_t j = 0; j < n; ++j) {
        S s = 0;
        for (std::size_t t = 0; t < hd; ++t) s += c.qkv(i, qo + t) * c.qkv(j, ko + t);
        pm(i, j) = s * scale;
        mx = std::max(mx, pm(i, j));
      }
      S z = 0;
      for (std::size_t j = 0; j < n; ++j) z += (pm(i, j) = std::exp(pm(i, j) - mx));
      for (std::size_t j = 0; j < n; ++j) pm(i, j) /= z;
      for (std::size_t j = 0; j < n; ++j) {
        const S w = pm(i, j);
        for (std::size_t t = 0; t < hd; ++t) c.o(i, qo + t) += w * c.qkv(j, vo + t);
      }
    }
  }
  c.x_mid = linear(c.o, bp.proj_w, bp.proj_b);
  add_inplace(c.x_mid, x);
  layer_norm(c.x_mid, bp.ln2_g, bp.ln2_b, c.xhat2, c.rstd2, c.b);
  c.u = linear(c.b, bp.fc1_w, bp.fc1_b);
  c.g = c.u;
  for (auto& v : c.g.storage()) v = gelu(v);
  Matrix<S> out = linear(c.g, bp.fc2_w, bp.fc2_b);
  add_inplace(out, c.x_mid);
  return out;
}

/// Backpropagates through one block. Parameter gradients go to `gp` when
/// non-null. Returns the gradient w.r.t. the block input when `need_dx`.
template <class S>
Matrix<S> block_backward(const EncoderConfig& cfg, const BlockParams<S>& bp, const BlockCache<S>& c,
                         const Matrix<S>& dout, BlockParams<S>* gp, bool need_dx) {
  const std::size_t n = dout.rows(), d = cfg.dim, hd = cfg.head_dim();
  // MLP branch
  Matrix<S> dg = linear_backward(dout, c.g, bp.fc2_w, gp ? &gp->fc2_w : nullptr, gp ? &gp->fc2_b : nullptr);
  for (std::size_t k = 0; k < dg.size(); ++k) dg.data()[k] *= gelu_grad(c.u.data()[k]);
  Matrix<S> db = linear_backward(dg, c.b, bp.fc1_w, gp ? &gp->fc1_w : nullptr, gp ? &gp->fc1_b : nullptr);
  Matrix<S> dmid = layer_norm_backward(db, c.xhat2, c.rstd2, bp.ln2_g, gp ? &gp->ln2_g : nullptr,
                                       gp ? &gp->ln2_b : nullptr);
  add_inplace(dmid, dout);
  // attention branch
  Matrix<S> dO = linear_backward(dmid, c.o, bp.proj_w, gp ? &gp->proj_w : nullptr, gp ? &gp->proj_b : nullptr);
  Matrix<S> dqkv(n, 3 * d);
  const S scale = S(1) / std::sqrt(S(hd));
  std::vector<S> dp(n);
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const std::size_t qo = h * hd, ko = d + h * hd, vo = 2 * d + h * hd;
    const Matrix<S>& pm = c.attn[h];
    for (std::size_t i = 0; i < n; ++i) {
      S dot_pd = 0;
      for (std::size_t j = 0; j < n; ++j) {
        S s = 0;
        for (std::size_t t = 0; t < hd; ++t) s += dO(i, qo + t) * c.qkv(j, vo + t);
        dp[j] = s;
        dot_pd += s * pm(i, j);
        for (std::size_t t = 0; t < hd; ++t) dqkv(j, vo + t) += pm(i, j) * dO(i, qo + t);
      }
      for (std::size_t j = 0; j < n; ++j) {
        const S ds = pm(i, j) * (dp[j] - dot_pd) * scale;
        for (std::size_t t = 0; t < hd; ++t) {
          dqkv(i, qo + t) += ds * c.qkv(j, ko + t);
          dqkv(j, ko + t) += ds * c.qkv(i, qo + t);
        }
      }
    }
  }
  Matrix<S> da = linear_backward(dqkv, c.a, bp.qkv_w, gp ? &gp->qkv_w : nullptr, gp ? &gp->qkv_b : nullptr);
  Matrix<S> dx;
  if (!need_dx && !gp) return dx;
  dx = layer_norm_backward(da, c.xhat1, c.rstd1, bp.ln1_g, gp ? &gp->ln1_g : nullptr, gp ? &gp->ln1_b : nullptr);
  add_inplace(dx, dmid);
  return dx;
}

}  // namespace detail

/// Runs the encoder and projection head. `masked`, when given, marks tokens
/// whose patch embedding is replaced by the learned mask token.
template <class S>
ForwardResult<S> forward(const EncoderState<S>& st, const Fbank& x, ForwardCache<S>* cache = nullptr,
                         const std::vector<bool>* masked = nullptr) {
  const auto& cfg = st.config;
  const auto& p = st.params;
  ForwardCache<S> local;
  ForwardCache<S>& c = cache ? *cache : local;
  c = ForwardCache<S>{};
  c.patches = extract_patches<S>(cfg, x);
  Matrix<S> h = detail::linear(c.patches, p.patch_w, p.patch_b);
  if (masked) {
    require(masked->size() == cfg.n_tokens(), ErrorKind::Shape, "token mask has wrong length");
    for (std::size_t t = 0; t < h.rows(); ++t)
      if ((*masked)[t])
        for (std::size_t j = 0; j < cfg.dim; ++j) h(t, j) = p.mask_token(0, j);
  }
  add_inplace(h, p.pos);
  c.blocks.resize(cfg.depth);
  for (std::size_t i = 0; i < cfg.depth; ++i) h = detail::block_forward(cfg, p.blocks[i], h, c.blocks[i]);
  c.tokens = h;

  ForwardResult<S> r;
  r.pooled.assign(cfg.dim, S(0));
  for (std::size_t t = 0; t < h.rows(); ++t)
    for (std::size_t j = 0; j < cfg.dim; ++j) r.pooled[j] += h(t, j);
  for (auto& v : r.pooled) v /= S(h.rows());

  Matrix<S> a(1, cfg.dim);
  std::copy(r.pooled.begin(), r.pooled.end(), a.data());
  const std::size_t n_head = p.head_w.size();
  c.head_in.resize(n_head);
  c.head_pre.resize(n_head);
  for (std::size_t l = 0; l < n_head; ++l) {
    c.head_in[l] = a;
    c.head_pre[l] = detail::linear(a, p.head_w[l], p.head_b[l]);
    a = c.head_pre[l];
    if (l + 1 < n_head)
      for (auto& v : a.storage()) v = detail::gelu(v);
  }
  c.raw_out = a.storage();
  c.raw_norm = l2_norm<S>(c.raw_out);
  require(c.raw_norm > S(0) && std::isfinite(c.raw_norm), ErrorKind::Numerical, "projection has zero or non-finite norm");
  r.projected = c.raw_out;
  for (auto& v : r.projected) v /= c.raw_norm;
  c.projected = r.projected;
  r.tokens = std::move(h);
  c.valid = true;
  return r;
}

/// Gradients arriving at the encoder outputs; empty members mean zero.
template <class S>
struct Upstream {
  Matrix<S> d_tokens;
  std::vector<S> d_pooled;
  std::vector<S> d_projected;
};

/// Gradient of x / ||x|| applied to `dy`: (dy - y (y . dy)) / ||x||.
template <class S>
std::vector<S> normalize_backward(std::span<const S> y, S norm, std::span<const S> dy) {
  const S ydy = dot(y, dy);
  std::vector<S> dx(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) dx[i] = (dy[i] - y[i] * ydy) / norm;
  return dx;
}

/// Accumulates parameter gradients for trainable groups into `grads`.
/// Frozen groups are left untouched; backpropagation stops below the lowest
/// trainable group.
template <class S>
void backward(const EncoderState<S>& st, const ForwardCache<S>& c, const Upstream<S>& up, EncoderParams<S>& grads,
              const std::vector<bool>* masked = nullptr) {
  require(c.valid, ErrorKind::State, "backward called without a recorded forward pass");
  const auto& cfg = st.config;
  const auto& p = st.params;
  const std::size_t n_tok = cfg.n_tokens();

  bool below_head = st.embed_trainable() || (masked && st.mae_trainable());
  std::size_t lowest_block = cfg.depth;
  for (std::size_t i = 0; i < cfg.depth; ++i)
    if (st.block_trainable(i)) {
      lowest_block = std::min(lowest_block, i);
      below_head = true;
    }
  if (st.embed_trainable() || (masked && st.mae_trainable())) lowest_block = 0;

  std::vector<S> d_pooled(cfg.dim, S(0));
  if (!up.d_pooled.empty()) d_pooled = up.d_pooled;

  if (!up.d_projected.empty() && (st.head_trainable() || below_head)) {
    std::vector<S> da = normalize_backward<S>(c.projected, c.raw_norm, up.d_projected);
    Matrix<S> dy(1, da.size());
    std::copy(da.begin(), da.end(), dy.data());
    const bool train_head = st.head_trainable();
    for (std::size_t l = p.head_w.size(); l-- > 0;) {
      if (l + 1 < p.head_w.size())
        for (std::size_t k = 0; k < dy.size(); ++k) dy.data()[k] *= detail::gelu_grad(c.head_pre[l].data()[k]);
      const bool need_dx = l > 0 || below_head;
      dy = detail::linear_backward(dy, c.head_in[l], p.head_w[l], train_head ? &grads.head_w[l] : nullptr,
                                   train_head ? &grads.head_b[l] : nullptr, need_dx);
      if (!need_dx) break;
    }
    if (below_head)
      for (std::size_t j = 0; j < cfg.dim; ++j) d_pooled[j] += dy(0, j);
  }
  if (!below_head) return;

  Matrix<S> dh(n_tok, cfg.dim);
  if (!up.d_tokens.empty()) dh = up.d_tokens;
  for (std::size_t t = 0; t < n_tok; ++t)
    for (std::size_t j = 0; j < cfg.dim; ++j) dh(t, j) += d_pooled[j] / S(n_tok);

  for (std::size_t i = cfg.depth; i-- > lowest_block;) {
    const bool need_dx = i > lowest_block || i == 0;
    BlockParams<S>* gp = st.block_trainable(i) ? &grads.blocks[i] : nullptr;
    dh = detail::block_backward(cfg, p.blocks[i], c.blocks[i], dh, gp, need_dx);
  }
  if (lowest_block != 0) return;

  if (st.embed_trainable()) {
    add_inplace(grads.pos, dh);
    Matrix<S> demb = dh;
    if (masked)
      for (std::size_t t = 0; t < n_tok; ++t)
        if ((*masked)[t])
          for (std::size_t j = 0; j < cfg.dim; ++j) demb(t, j) = S(0);
    detail::linear_backward(demb, c.patches, p.patch_w, &grads.patch_w, &grads.patch_b, false);
  }
  if (masked && st.mae_trainable())
    for (std::size_t t = 0; t < n_tok; ++t)
      if ((*masked)[t])
        for (std::size_t j = 0; j < cfg.dim; ++j) grads.mask_token(0, j) += dh(t, j);
}

// ---------------------------------------------------------------------------
// Masked-patch reconstruction

/// Token mask with exactly round(ratio * P) masked tokens chosen uniformly.
inline std::vector<bool> sample_token_mask(std::size_t n_tokens, double ratio, Rng& rng) {
  require(ratio > 0.0 && ratio < 1.0, ErrorKind::Parameter, "mask ratio must be in (0, 1)");
  const auto n_mask = static_cast<std::size_t>(std::lround(ratio * static_cast<double>(n_tokens)));
  require(n_mask >= 1, ErrorKind::Parameter, "mask ratio masks zero patches");
  std::vector<std::size_t> idx(n_tokens);
  for (std::size_t i = 0; i < n_tokens; ++i) idx[i] = i;
  shuffle(idx, rng);
  std::vector<bool> mask(n_tokens, false);
  for (std::size_t i = 0; i < n_mask; ++i) mask[idx[i]] = true;
  return mask;
}

/// Linear reconstruction of every token's patch from the final-block output.
template <class S>
Matrix<S> reconstruct(const EncoderState<S>& st, const Matrix<S>& tokens) {
  return detail::linear(tokens, st.params.recon_w, st.params.recon_b);
}

/// Mean squared error over masked patches between `prediction` and `target`
/// (both P × patch_size). The gradient w.r.t. `prediction` goes to `d_pred`
/// when non-null.
template <class S>
S masked_mse(const Matrix<S>& prediction, const Matrix<S>& target, const std::vector<bool>& masked,
             Matrix<S>* d_pred = nullptr) {
  std::size_t n_masked = 0;
  for (bool m : masked) n_masked += m;
  require(n_masked >= 1, ErrorKind::Parameter, "no masked patches");
  const S denom = S(n_masked * prediction.cols());
  if (d_pred) *d_pred = Matrix<S>(prediction.rows(), prediction.cols());
  S loss = 0;
  for (std::size_t t = 0; t < prediction.rows(); ++t) {
    if (!masked[t]) continue;
    for (std::size_t j = 0; j < prediction.cols(); ++j) {
      const S e = prediction(t, j) - target(t, j);
      loss += e * e;
      if (d_pred) (*d_pred)(t, j) = S(2) * e / denom;
    }
  }
  return loss / denom;
}

/// Reconstruction loss of one item under `masked`; accumulates gradients into
/// `grads` when non-null.
template <class S>
S mae_loss(const EncoderState<S>& st, const Fbank& x, const std::vector<bool>& masked,
           EncoderParams<S>* grads = nullptr) {
  ForwardCache<S> cache;
  forward(st, x, &cache, &masked);
  const Matrix<S> pred = reconstruct(st, cache.tokens);
  Matrix<S> d_pred;
  const S loss = masked_mse(pred, cache.patches, masked, grads ? &d_pred : nullptr);
  if (grads) {
    Upstream<S> up;
    up.d_tokens = detail::linear_backward(d_pred, cache.tokens, st.params.recon_w,
                                          st.mae_trainable() ? &grads->recon_w : nullptr,
                                          st.mae_trainable() ? &grads->recon_b : nullptr);
    backward(st, cache, up, *grads, &masked);
  }
  return loss;
}

}  // namespace uamix
