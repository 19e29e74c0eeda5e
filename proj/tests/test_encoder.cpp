#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "uamix/checkpoint.hpp"
#include "uamix/mixing.hpp"
#include "uamix/objective.hpp"
#include "uamix/synth.hpp"
#include "uamix/tuning.hpp"

using namespace uamix;
namespace fs = std::filesystem;

namespace {

EncoderConfig small_config() { return gradcheck::tiny_config(); }

Fbank random_input(const EncoderConfig& c, std::mt19937_64& rng) { return gradcheck::random_input(c, rng); }

void expect_kind(const std::function<void()>& fn, ErrorKind kind) {
  try {
    fn();
    FAIL() << "expected " << to_string(kind);
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), kind) << e.what();
  }
}

void expect_report(const gradcheck::Report& r) {
  EXPECT_LT(r.worst, 1e-5) << r.where;
  EXPECT_GT(r.checked, 50u);
}

bool all_zero(const EncoderParams<double>& p) {
  for (const auto& t : tensors(p))
    for (double v : t.tensor->storage())
      if (v != 0.0) return false;
  return true;
}

// Writes patch `perm[p]` of `x` into patch slot `p` of the result.
Fbank permute_patches(const EncoderConfig& c, const Fbank& x, const std::vector<std::size_t>& perm) {
  const std::size_t nf = c.f_len / c.patch_f;
  Fbank out(c.t_len, c.f_len);
  for (std::size_t p = 0; p < perm.size(); ++p) {
    const std::size_t src = perm[p];
    for (std::size_t dt = 0; dt < c.patch_t; ++dt)
      for (std::size_t df = 0; df < c.patch_f; ++df)
        out((p / nf) * c.patch_t + dt, (p % nf) * c.patch_f + df) =
            x((src / nf) * c.patch_t + dt, (src % nf) * c.patch_f + df);
  }
  return out;
}

}  // namespace

TEST(Encoder, OutputShapesAndUnitNorm) {
  const auto cfg = small_config();
  const auto st = init_encoder<float>(cfg, 1);
  std::mt19937_64 rng(1);
  const auto r = forward(st, random_input(cfg, rng));
  EXPECT_EQ(r.tokens.rows(), 8u);
  EXPECT_EQ(r.tokens.cols(), 16u);
  EXPECT_EQ(r.pooled.size(), 16u);
  ASSERT_EQ(r.projected.size(), 12u);
  double n = 0;
  for (float v : r.projected) n += double(v) * v;
  EXPECT_NEAR(std::sqrt(n), 1.0, 1e-6);
}

TEST(Encoder, PooledIsTokenMean) {
  const auto cfg = small_config();
  const auto st = init_encoder<double>(cfg, 2);
  std::mt19937_64 rng(2);
  const auto r = forward(st, random_input(cfg, rng));
  for (std::size_t j = 0; j < cfg.dim; ++j) {
    double s = 0;
    for (std::size_t t = 0; t < r.tokens.rows(); ++t) s += r.tokens(t, j);
    EXPECT_NEAR(r.pooled[j], s / 8.0, 1e-12);
  }
}

TEST(Encoder, InitAndForwardAreDeterministic) {
  const auto cfg = small_config();
  const auto a = init_encoder<float>(cfg, 3), b = init_encoder<float>(cfg, 3), c = init_encoder<float>(cfg, 4);
  EXPECT_EQ(a.params.patch_w, b.params.patch_w);
  EXPECT_EQ(a.params.blocks[1].fc2_w, b.params.blocks[1].fc2_w);
  EXPECT_NE(a.params.patch_w, c.params.patch_w);
  std::mt19937_64 rng(3);
  const auto x = random_input(cfg, rng);
  EXPECT_EQ(forward(a, x).projected, forward(b, x).projected);
}

TEST(Encoder, RejectsWrongInputShape) {
  const auto st = init_encoder<float>(small_config(), 1);
  expect_kind([&] { forward(st, Fbank(15, 8)); }, ErrorKind::Shape);
  auto bad = small_config();
  bad.t_len = 18;
  expect_kind([&] { init_encoder<float>(bad, 1); }, ErrorKind::Shape);
  bad = small_config();
  bad.heads = 3;
  expect_kind([&] { init_encoder<float>(bad, 1); }, ErrorKind::Config);
}

TEST(EncoderGradients, ProjectionObjective) {
  const auto cfg = small_config();
  auto st = init_encoder<double>(cfg, 5);
  std::mt19937_64 rng(5);
  const auto x = random_input(cfg, rng);
  std::vector<double> c(cfg.out_dim());
  for (auto& v : c) v = std::normal_distribution<double>()(rng);
  ForwardCache<double> cache;
  forward(st, x, &cache);
  auto grads = zero_params<double>(cfg);
  Upstream<double> up;
  up.d_projected = c;
  backward(st, cache, up, grads);
  auto wide = st.cast<gradcheck::Wide>();
  expect_report(gradcheck::compare(
      wide,
      [&] {
        const auto r = forward(wide, x);
        return std::inner_product(c.begin(), c.end(), r.projected.begin(), gradcheck::Wide(0));
      },
      grads));
}

TEST(EncoderGradients, ReconstructionLoss) {
  for (std::uint64_t seed : {6, 16}) expect_report(gradcheck::reconstruction(seed));
}

TEST(EncoderGradients, NnclrEndToEnd) {
  for (std::uint64_t seed : {7, 17}) expect_report(gradcheck::contrastive(seed, false));
}

TEST(EncoderGradients, MixedEndToEnd) {
  for (std::uint64_t seed : {7, 17}) expect_report(gradcheck::contrastive(seed, true));
}

TEST(EncoderGradients, FrozenGroupsReceiveNothing) {
  const auto cfg = small_config();
  auto st = init_encoder<double>(cfg, 8);
  std::mt19937_64 rng(8);
  const auto x = random_input(cfg, rng);
  ForwardCache<double> cache;
  forward(st, x, &cache);
  Upstream<double> up;
  up.d_projected.assign(cfg.out_dim(), 1.0);
  up.d_projected[0] = -3.0;

  st.trainable.assign(st.n_groups(), false);
  auto grads = zero_params<double>(cfg);
  backward(st, cache, up, grads);
  EXPECT_TRUE(all_zero(grads));

  set_trainable(st, Trainability::HeadOnly);
  backward(st, cache, up, grads);
  for (const auto& t : tensors(grads)) {
    double mx = 0;
    for (double v : t.tensor->storage()) mx = std::max(mx, std::abs(v));
    if (t.group.kind == GroupKind::Head)
      EXPECT_GT(mx, 0.0) << t.name;
    else
      EXPECT_EQ(mx, 0.0) << t.name;
  }
}

TEST(EncoderGradients, NormalizationGradientIsOrthogonalToOutput) {
  std::mt19937_64 rng(9);
  for (int t = 0; t < 20; ++t) {
    const auto y = oracle::random_unit(10, rng);
    std::vector<double> dy(10);
    for (auto& v : dy) v = std::normal_distribution<double>()(rng);
    const auto dx = normalize_backward<double>(y, 2.5, dy);
    EXPECT_NEAR(oracle::dot(dx, y), 0.0, 1e-12);
  }
}

TEST(Encoder, TokensArePermutationEquivariantWithoutPositions) {
  const auto cfg = small_config();
  auto st = init_encoder<double>(cfg, 10);
  st.params.pos.fill(0.0);
  std::mt19937_64 rng(10);
  const auto x = random_input(cfg, rng);
  std::vector<std::size_t> perm(cfg.n_tokens());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  const auto a = forward(st, x), b = forward(st, permute_patches(cfg, x, perm));
  for (std::size_t p = 0; p < perm.size(); ++p)
    for (std::size_t j = 0; j < cfg.dim; ++j) EXPECT_NEAR(b.tokens(p, j), a.tokens(perm[p], j), 1e-12);
  for (std::size_t j = 0; j < cfg.dim; ++j) EXPECT_NEAR(a.pooled[j], b.pooled[j], 1e-12);
}

TEST(Masking, MasksExactRoundedCount) {
  Rng rng = make_rng(11, 0);
  for (int t = 0; t < 100; ++t) {
    const auto m = sample_token_mask(8, 0.75, rng);
    EXPECT_EQ(std::count(m.begin(), m.end(), true), 6);
  }
  expect_kind([&] { sample_token_mask(8, 1.0, rng); }, ErrorKind::Parameter);
  expect_kind([&] { sample_token_mask(8, 0.01, rng); }, ErrorKind::Parameter);
}

TEST(Masking, LossIgnoresUnmaskedPatches) {
  std::mt19937_64 rng(12);
  Matrix<double> pred(8, 16), target(8, 16);
  for (auto& v : pred.storage()) v = std::normal_distribution<double>()(rng);
  for (auto& v : target.storage()) v = std::normal_distribution<double>()(rng);
  std::vector<bool> mask(8, false);
  mask[1] = mask[4] = mask[6] = true;
  Matrix<double> d;
  const double base = masked_mse(pred, target, mask, &d);
  auto t2 = target;
  for (std::size_t j = 0; j < 16; ++j) t2(0, j) += 5.0, t2(7, j) -= 2.0;
  EXPECT_EQ(masked_mse(pred, t2, mask), base);
  for (std::size_t j = 0; j < 16; ++j) EXPECT_EQ(d(0, j), 0.0);
  double expect = 0;
  for (std::size_t r : {1, 4, 6})
    for (std::size_t j = 0; j < 16; ++j) expect += (pred(r, j) - target(r, j)) * (pred(r, j) - target(r, j));
  EXPECT_NEAR(base, expect / 48.0, 1e-12);
  EXPECT_EQ(masked_mse(target, target, mask), 0.0);
}

TEST(Trainability, TopHalfSelectsUpperBlocks) {
  auto cfg = small_config();
  cfg.depth = 12;
  auto st = init_encoder<float>(cfg, 1);
  set_trainable(st, Trainability::TopHalf);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(st.block_trainable(i), i >= 6) << i;
  EXPECT_TRUE(st.head_trainable());
  EXPECT_FALSE(st.embed_trainable());
  EXPECT_FALSE(st.mae_trainable());

  cfg.depth = 5;
  auto st5 = init_encoder<float>(cfg, 1);
  set_trainable(st5, Trainability::TopHalf);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(st5.block_trainable(i), i >= 2) << i;

  set_trainable(st5, Trainability::HeadOnly);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_FALSE(st5.block_trainable(i));
  EXPECT_TRUE(st5.head_trainable());
}

class CheckpointTest : public ::testing::Test {
 protected:
  fs::path dir;
  void SetUp() override {
    dir = fs::temp_directory_path() / ("uamix_ckpt_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                       "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }

  std::string bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
  }
  void write(const fs::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << s;
  }
};

TEST_F(CheckpointTest, RoundTripIsBitExact) {
  auto st = init_encoder<float>(small_config(), 13);
  set_trainable(st, Trainability::TopHalf);
  st.stage = Stage::Stage1;
  st.step = 17;
  save_checkpoint(st, dir / "a.ckpt");
  const auto back = load_checkpoint<float>(dir / "a.ckpt");
  EXPECT_EQ(back.config, st.config);
  EXPECT_EQ(back.stage, Stage::Stage1);
  EXPECT_EQ(back.step, 17u);
  EXPECT_EQ(back.trainable, st.trainable);
  const auto a = tensors(st.params), b = tensors(back.params);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t t = 0; t < a.size(); ++t) {
    ASSERT_EQ(a[t].tensor->size(), b[t].tensor->size());
    EXPECT_EQ(std::memcmp(a[t].tensor->data(), b[t].tensor->data(), a[t].tensor->size() * sizeof(float)), 0)
        << a[t].name;
  }
  save_checkpoint(back, dir / "b.ckpt");
  EXPECT_EQ(bytes(dir / "a.ckpt"), bytes(dir / "b.ckpt"));
}

TEST_F(CheckpointTest, CorruptFilesAreRejected) {
  const auto st = init_encoder<float>(small_config(), 14);
  save_checkpoint(st, dir / "good.ckpt");
  const std::string good = bytes(dir / "good.ckpt");

  expect_kind([&] { load_checkpoint<float>(dir / "missing.ckpt"); }, ErrorKind::Io);

  std::string s = good;
  s[0] = 'X';
  write(dir / "magic.ckpt", s);
  expect_kind([&] { load_checkpoint<float>(dir / "magic.ckpt"); }, ErrorKind::Format);

  write(dir / "short.ckpt", good.substr(0, good.size() - 10));
  expect_kind([&] { load_checkpoint<float>(dir / "short.ckpt"); }, ErrorKind::Corruption);

  write(dir / "header.ckpt", good.substr(0, 20));
  expect_kind([&] { load_checkpoint<float>(dir / "header.ckpt"); }, ErrorKind::Corruption);

  write(dir / "trailing.ckpt", good + "x");
  expect_kind([&] { load_checkpoint<float>(dir / "trailing.ckpt"); }, ErrorKind::Corruption);

  s = good;
  s[15] = '\x7f';
  write(dir / "len.ckpt", s);
  expect_kind([&] { load_checkpoint<float>(dir / "len.ckpt"); }, ErrorKind::Corruption);

  s = good;
  const auto pos = s.find("\"float32\"");
  ASSERT_NE(pos, std::string::npos);
  s.replace(pos, 9, "\"float64\"");
  write(dir / "dtype.ckpt", s);
  expect_kind([&] { load_checkpoint<float>(dir / "dtype.ckpt"); }, ErrorKind::Format);
}

TEST(Pretrain, ReconstructionLossDecreases) {
  SynthSpec spec;
  spec.n_classes = 4;
  spec.per_class = 8;
  spec.t_len = 16;
  spec.f_len = 8;
  const auto ds = generate_synthetic(spec, 15);
  auto st = init_encoder<float>(small_config(), 15);
  PretrainConfig pc;
  pc.epochs = 20;
  pc.batch = 8;
  pc.seed = 15;
  const auto losses = run_pretrain(st, ds, pc);
  ASSERT_EQ(losses.size(), 20u);
  EXPECT_LT(losses.back(), 0.8 * losses.front());
  double late = 0, early = 0;
  for (int i = 0; i < 5; ++i) early += losses[i], late += losses[15 + i];
  EXPECT_LT(late, early);
  EXPECT_EQ(st.stage, Stage::Mae);
}
