#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "test_util.hpp"

using namespace psm;

namespace {

SynthConfig small_synth(std::uint64_t seed = 3) {
  SynthConfig s;
  s.n_samples = 64;
  s.n_test = 16;
  s.T = 12;
  s.L = 4;
  s.d_v = 8;
  s.d_w = 8;
  s.d_e = 16;
  s.gt_min = 2;
  s.gt_max = 5;
  s.seed = seed;
  return s;
}

TrainConfig small_train() {
  TrainConfig t;
  t.h = 8;
  t.d = 8;
  t.m = 2;
  t.k = 5;
  t.batch_size = 8;
  t.learning_rate = 0.005;
  t.epochs = 3;
  t.seed = 1;
  return t;
}

struct Fixture {
  SynthData data;
  MiningIndex index;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture x;
    x.data = generate(small_synth());
    x.index = build_index(x.data.train_embeddings, 5);
    return x;
  }();
  return f;
}

ModelConfig scalar_config() {
  ModelConfig c;
  c.d_w = c.d_v = c.h = c.d = c.m = 1;
  return c;
}

}  // namespace

// --- Adam ---------------------------------------------------------------------

TEST(Adam, ZeroGradientsLeaveParams) {
  auto p = init_params(scalar_config(), 2);
  const auto before = p;
  auto st = AdamState::like(p);
  adam_update(p, ModelParams::zeros(p.cfg), st, 0.1);
  EXPECT_TRUE(p == before);
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, FirstStepIsMinusLr) {
  auto p = ModelParams::zeros(scalar_config());
  auto g = ModelParams::zeros(p.cfg);
  g.W_qw(0, 0) = 1.0;
  g.b_out(0, 0) = -3.0;
  auto st = AdamState::like(p);
  adam_update(p, g, st, 0.01);
  EXPECT_NEAR(p.W_qw(0, 0), -0.01, 1e-9);
  EXPECT_NEAR(p.b_out(0, 0), 0.01, 1e-9);
  EXPECT_EQ(p.W_v(0, 0), 0.0);
}

TEST(Adam, ThreeStepsOnQuadratic) {
  // f = 0.5 sum a_i (x_i - b_i)^2 with a_i = 1 + i/2, b_i = (i % 3) - 1, x_i(0) = i/10
  auto p = ModelParams::zeros(scalar_config());
  const std::size_t n = p.num_values();
  ASSERT_EQ(n, 13u);
  std::vector<double> x(n), a(n), b(n);
  for (std::size_t i = 0; i < n; ++i) {
    a[i] = 1.0 + 0.5 * i;
    b[i] = static_cast<double>(i % 3) - 1.0;
    x[i] = 0.1 * i;
  }
  p.unflatten(x);
  auto st = AdamState::like(p);
  auto g = ModelParams::zeros(p.cfg);
  for (int t = 0; t < 3; ++t) {
    const auto cur = p.flatten();
    std::vector<double> gv(n);
    for (std::size_t i = 0; i < n; ++i) gv[i] = a[i] * (cur[i] - b[i]);
    g.unflatten(gv);
    adam_update(p, g, st, 0.05);
  }
  const std::vector<double> expect = {
      -0.14968830282829443, -0.033590454458200462, 0.34958533883810133, 0.1502260521337552,
      0.25111003409864141,  0.64920686341567169,   0.45017689915902082, 0.5504950127808087,
      0.94630251592681991,  0.75014513965113072,   0.85031169589562439, 0.96640953910905414,
      1.0501229745664964};
  const auto got = p.flatten();
  for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(got[i], expect[i], 1e-12) << i;
  EXPECT_EQ(st.step, 3u);
}

TEST(Adam, ShapeMismatch) {
  auto p = ModelParams::zeros(scalar_config());
  ModelConfig other = scalar_config();
  other.h = 2;
  auto st = AdamState::like(p);
  EXPECT_THROW(adam_update(p, ModelParams::zeros(other), st, 0.1), Error);
}

// --- config ---------------------------------------------------------------------

TEST(TrainConfigJson, RoundTripAndOverlay) {
  TrainConfig c = small_train();
  c.margins.g5 = 0.2;
  c.toggles.use_l_prop = false;
  TrainConfig d;
  apply_json(d, nlohmann::json::parse(to_json(c).dump()));
  EXPECT_EQ(to_json(d).dump(), to_json(c).dump());

  TrainConfig e;
  apply_json(e, nlohmann::json::parse(R"({"epochs": 7, "margins": {"g1": 0.1}})"));
  EXPECT_EQ(e.epochs, 7u);
  EXPECT_EQ(e.margins.g1, 0.1);
  EXPECT_EQ(e.margins.g2, 0.5);
  EXPECT_EQ(e.learning_rate, 0.0004);
  EXPECT_EQ(e.batch_size, 32u);
}

TEST(TrainConfigJson, UnknownKeysRejected) {
  TrainConfig c;
  EXPECT_THROW(apply_json(c, nlohmann::json::parse(R"({"epoch": 3})")), Error);
  EXPECT_THROW(apply_json(c, nlohmann::json::parse(R"({"margins": {"g7": 1}})")), Error);
  EXPECT_THROW(apply_json(c, nlohmann::json::parse(R"({"toggles": {"use_l_base": true}})")), Error);
  EXPECT_THROW(apply_json(c, nlohmann::json::parse("[1]")), Error);
}

TEST(TrainConfigJson, Validation) {
  TrainConfig c;
  c.batch_size = 0;
  EXPECT_THROW(validate(c), Error);
  c = TrainConfig{};
  c.learning_rate = -1;
  EXPECT_THROW(validate(c), Error);
  c = TrainConfig{};
  c.margins.g2 = -0.5;
  EXPECT_THROW(validate(c), Error);
}

// --- checkpoints ------------------------------------------------------------------

TEST(Checkpoint, RoundTripF64) {
  test::TempDir dir("ck");
  Checkpoint ck;
  ck.params = init_params(small_train().model(8, 8), 4);
  ck.adam = AdamState::like(ck.params);
  ck.adam->step = 17;
  ck.adam->m1 = init_params(ck.params.cfg, 5);
  ck.adam->m2 = init_params(ck.params.cfg, 6);
  ck.epochs_done = 3;
  ck.config_json = R"({"x":1})";
  save_checkpoint(dir / "a.ckpt", ck);
  EXPECT_TRUE(load_checkpoint(dir / "a.ckpt") == ck);
}

TEST(Checkpoint, F32RoundsParams) {
  test::TempDir dir("ck32");
  Checkpoint ck;
  ck.params = init_params(small_train().model(3, 4), 4);
  save_checkpoint(dir / "a.ckpt", ck, Dtype::f32);
  const auto back = load_checkpoint(dir / "a.ckpt");
  EXPECT_FALSE(back.adam.has_value());
  const auto x = ck.params.flatten(), y = back.params.flatten();
  ASSERT_EQ(x.size(), y.size());
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], static_cast<double>(static_cast<float>(x[i])));
  EXPECT_LT(std::filesystem::file_size(dir / "a.ckpt") * 1.0, 4.0 * x.size() + 400);
}

TEST(Checkpoint, Corruption) {
  test::TempDir dir("ckbad");
  Checkpoint ck;
  ck.params = init_params(small_train().model(3, 4), 4);
  save_checkpoint(dir / "a.ckpt", ck);
  auto bytes = test::slurp(dir / "a.ckpt");
  {
    std::string b = bytes;
    b[0] = 'X';
    std::ofstream(dir / "b.ckpt", std::ios::binary) << b;
    EXPECT_THROW(load_checkpoint(dir / "b.ckpt"), Error);
  }
  {
    std::ofstream(dir / "c.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() - 5);
    EXPECT_THROW(load_checkpoint(dir / "c.ckpt"), Error);
  }
  {
    std::ofstream(dir / "d.ckpt", std::ios::binary) << bytes << "x";
    EXPECT_THROW(load_checkpoint(dir / "d.ckpt"), Error);
  }
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), Error);
}

TEST(Checkpoint, NonFiniteRejected) {
  test::TempDir dir("cknan");
  Checkpoint ck;
  ck.params = init_params(small_train().model(3, 4), 4);
  ck.params.W_v(0, 0) = std::nan("");
  EXPECT_THROW(save_checkpoint(dir / "a.ckpt", ck), Error);
}

// --- schedule -------------------------------------------------------------------

TEST(Schedule, EpochOrderIsSeededPermutation) {
  const auto a = epoch_order(5, 0, 50), b = epoch_order(5, 0, 50), c = epoch_order(5, 1, 50);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  auto s = a;
  std::sort(s.begin(), s.end());
  for (std::uint32_t i = 0; i < 50; ++i) EXPECT_EQ(s[i], i);
}

// --- train_step -------------------------------------------------------------------

TEST(TrainStep, ZeroLearningRateKeepsParams) {
  const auto& f = fixture();
  auto cfg = small_train();
  cfg.learning_rate = 0.0;
  auto p = init_params(cfg.model(f.data.train.d_w, f.data.train.d_v), 1);
  const auto before = p;
  auto st = AdamState::like(p);
  const auto stats = train_step(p, st, {0, 1, 2, 3}, f.data.train, f.index, cfg, 0);
  EXPECT_TRUE(p == before);
  EXPECT_GT(stats.mean.total, 0.0);
  EXPECT_GT(stats.mean.l_base, 0.0);
  EXPECT_EQ(stats.step, 1u);
}

TEST(TrainStep, BatchOrderIndependent) {
  const auto& f = fixture();
  auto cfg = small_train();
  auto p1 = init_params(cfg.model(f.data.train.d_w, f.data.train.d_v), 1);
  auto p2 = p1;
  auto s1 = AdamState::like(p1), s2 = AdamState::like(p2);
  const auto a = train_step(p1, s1, {3, 9, 1, 40, 22}, f.data.train, f.index, cfg, 2);
  const auto b = train_step(p2, s2, {40, 1, 22, 3, 9}, f.data.train, f.index, cfg, 2);
  EXPECT_TRUE(p1 == p2);
  EXPECT_EQ(a.mean, b.mean);
}

TEST(TrainStep, WorkerCountIndependent) {
  const auto& f = fixture();
  auto cfg = small_train();
  auto p1 = init_params(cfg.model(f.data.train.d_w, f.data.train.d_v), 1);
  auto p2 = p1;
  auto s1 = AdamState::like(p1), s2 = AdamState::like(p2);
  std::vector<std::uint32_t> batch(20);
  std::iota(batch.begin(), batch.end(), 10u);
  train_step(p1, s1, batch, f.data.train, f.index, cfg, 0);
  cfg.workers = 4;
  train_step(p2, s2, batch, f.data.train, f.index, cfg, 0);
  EXPECT_TRUE(p1 == p2);
}

TEST(TrainStep, MismatchedIndexRejected) {
  const auto& f = fixture();
  auto cfg = small_train();
  auto p = init_params(cfg.model(f.data.train.d_w, f.data.train.d_v), 1);
  auto st = AdamState::like(p);
  const auto small = build_index(f.data.test_embeddings, 5);
  EXPECT_THROW(train_step(p, st, {0}, f.data.train, small, cfg, 0), Error);
  EXPECT_THROW(train_step(p, st, {}, f.data.train, f.index, cfg, 0), Error);
}

// A disabled term must match the same term forced inactive: sim = dis with a
// zero margin puts every contrastive argument at exactly 0.
TEST(TrainStep, ToggleSoundness) {
  std::mt19937_64 rng(8);
  const auto cfg = small_train();
  const auto p = init_params(cfg.model(5, 6), 3);
  const auto a = test::random_sample(rng, 0, 3, 7, 5, 6);
  const auto s = test::random_sample(rng, 1, 2, 9, 5, 6);
  for (int term = 0; term < 4; ++term) {
    LossConfig on;
    on.toggles = LossToggles::all_off();
    on.margins = Margins{0, 0, 0, 0, 0, 0};
    bool* flags[] = {&on.toggles.use_l_query, &on.toggles.use_l_prop, &on.toggles.use_l_rank_query,
                     &on.toggles.use_l_rank_prop};
    *flags[term] = true;
    LossConfig off = on;
    off.toggles = LossToggles::all_off();
    const auto g_on = grad_total(p, a, s, s, on);
    const auto g_off = grad_total(p, a, s, s, off);
    EXPECT_TRUE(g_on.grad == g_off.grad) << term;
    EXPECT_EQ(g_on.breakdown.total, g_off.breakdown.total) << term;
  }
}

// --- train ------------------------------------------------------------------------

TEST(Train, ZeroEpochsReturnsInit) {
  const auto& f = fixture();
  auto cfg = small_train();
  cfg.epochs = 0;
  const auto ck = train(f.data.train, f.index, cfg);
  EXPECT_TRUE(ck.params == init_params(cfg.model(f.data.train.d_w, f.data.train.d_v), cfg.seed));
  EXPECT_EQ(ck.epochs_done, 0u);
  EXPECT_EQ(ck.adam->step, 0u);
}

TEST(Train, StepCountAndLogFields) {
  const auto& f = fixture();
  auto cfg = small_train();
  cfg.epochs = 2;
  cfg.batch_size = 10;  // 64 -> 7 batches per epoch
  std::vector<StepStats> log;
  std::vector<std::uint32_t> epochs;
  TrainHooks hooks;
  hooks.on_step = [&](const StepStats& s) { log.push_back(s); };
  hooks.on_epoch = [&](const Checkpoint& c) { epochs.push_back(c.epochs_done); };
  const auto ck = train(f.data.train, f.index, cfg, std::nullopt, hooks);
  ASSERT_EQ(log.size(), 14u);
  EXPECT_EQ(log.back().step, 14u);
  EXPECT_EQ(log[7].epoch, 1u);
  EXPECT_EQ(log[7].batch, 0u);
  EXPECT_EQ(epochs, (std::vector<std::uint32_t>{1, 2}));
  EXPECT_EQ(ck.adam->step, 14u);
  const auto j = to_json(log[0]);
  for (const char* k : {"step", "epoch", "batch", "l_query", "l_prop", "l_cl", "l_query_n", "l_prop_n",
                        "l_rank_query", "l_rank_prop", "l_rank", "l_base", "total", "selected_proposal"})
    EXPECT_TRUE(j.contains(k)) << k;
}

TEST(Train, Deterministic) {
  const auto& f = fixture();
  auto cfg = small_train();
  const auto a = train(f.data.train, f.index, cfg);
  const auto b = train(f.data.train, f.index, cfg);
  EXPECT_TRUE(a == b);
  cfg.workers = 3;
  const auto c = train(f.data.train, f.index, cfg);
  EXPECT_TRUE(a.params == c.params);
  cfg.workers = 1;
  cfg.seed = 2;
  EXPECT_FALSE(train(f.data.train, f.index, cfg).params == a.params);
}

TEST(Train, ResumeMatchesUninterrupted) {
  const auto& f = fixture();
  test::TempDir dir("resume");
  auto cfg = small_train();
  cfg.epochs = 4;
  const auto full = train(f.data.train, f.index, cfg);

  auto half = cfg;
  half.epochs = 2;
  save_checkpoint(dir / "mid.ckpt", train(f.data.train, f.index, half));
  const auto mid = load_checkpoint(dir / "mid.ckpt");
  EXPECT_EQ(mid.epochs_done, 2u);
  const auto resumed = train(f.data.train, f.index, cfg, mid);
  EXPECT_TRUE(resumed.params == full.params);
  EXPECT_EQ(resumed.adam->step, full.adam->step);
  EXPECT_TRUE(resumed.adam->m2 == full.adam->m2);
}

TEST(Train, ResumeNeedsOptimizerState) {
  const auto& f = fixture();
  auto cfg = small_train();
  Checkpoint ck;
  ck.params = init_params(cfg.model(f.data.train.d_w, f.data.train.d_v), 1);
  EXPECT_THROW(train(f.data.train, f.index, cfg, ck), Error);
  ck.adam = AdamState::like(ck.params);
  auto other = cfg;
  other.h = 4;
  EXPECT_THROW(train(f.data.train, f.index, other, ck), Error);
}

TEST(Train, LossDecreases) {
  const auto& f = fixture();
  auto cfg = small_train();
  cfg.epochs = 5;
  std::vector<double> sum(5, 0.0);
  std::vector<int> cnt(5, 0);
  TrainHooks hooks;
  hooks.on_step = [&](const StepStats& s) {
    sum[s.epoch] += s.mean.total;
    ++cnt[s.epoch];
  };
  train(f.data.train, f.index, cfg, std::nullopt, hooks);
  EXPECT_LT(sum[4] / cnt[4], sum[0] / cnt[0]);
}

TEST(Train, AllTogglesOffIsBaseOnly) {
  // margins only reach the disabled terms, so they cannot matter
  const auto& f = fixture();
  auto cfg = small_train();
  cfg.toggles = LossToggles::all_off();
  std::vector<StepStats> log;
  TrainHooks hooks;
  hooks.on_step = [&](const StepStats& s) { log.push_back(s); };
  const auto a = train(f.data.train, f.index, cfg, std::nullopt, hooks);
  auto cfg2 = cfg;
  cfg2.margins = Margins{0.1, 0.9, 0.0, 1.5, 0.4, 0.0};
  const auto b = train(f.data.train, f.index, cfg2);
  EXPECT_TRUE(a.params == b.params);
  for (const auto& s : log) {
    EXPECT_EQ(s.mean.l_cl, 0.0);
    EXPECT_EQ(s.mean.l_rank, 0.0);
    EXPECT_EQ(s.mean.total, s.mean.l_base);
  }
  auto cfg3 = small_train();
  EXPECT_FALSE(train(f.data.train, f.index, cfg3).params == a.params);
}

TEST(Train, IndexCorpusMismatch) {
  const auto& f = fixture();
  const auto idx = build_index(f.data.test_embeddings, 5);
  EXPECT_THROW(train(f.data.train, idx, small_train()), Error);
}
