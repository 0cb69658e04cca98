#pragma once

// Mini-batch training: pair drawing, per-anchor gradients, fixed-order
// reduction, Adam, checkpoints and resume.
//
// Checkpoint layout (little-endian):
//   "PSMC" | u32 version=1 | u32 dtype (1=f32, 2=f64)
//   | u32 d_w d_v h d m | f64 r_min r_max
//   | u32 n_blocks | n_blocks x (str name | u32 rows | u32 cols | payload)
//   | u8 has_state [ | u64 adam_step | u32 epochs_done | moment1 blocks | moment2 blocks ]
//   | str config (JSON text of the run that produced it)
// where str = u32 length + bytes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "psm/common.hpp"
#include "psm/corpus.hpp"
#include "psm/loss.hpp"
#include "psm/miner.hpp"
#include "psm/model.hpp"

namespace psm {

struct TrainConfig {
  double learning_rate = 0.0004;
  std::uint32_t batch_size = 32;
  std::uint32_t epochs = 10;
  std::uint64_t seed = 0;
  std::uint32_t h = 64;
  std::uint32_t d = 256;
  std::uint32_t m = 3;
  double r_min = 0.02;
  double r_max = 0.45;
  double attn_scale = 10.0;
  std::uint32_t k = 20;
  Margins margins;
  double gamma_b = 0.3;
  LossToggles toggles;
  bool stop_gradient_branches = false;
  unsigned workers = 1;

  LossConfig loss() const {
    LossConfig c;
    c.margins = margins;
    c.gamma_b = gamma_b;
    c.toggles = toggles;
    c.stop_gradient_branches = stop_gradient_branches;
    return c;
  }

  ModelConfig model(std::uint32_t d_w, std::uint32_t d_v) const {
    ModelConfig c;
    c.d_w = d_w;
    c.d_v = d_v;
    c.h = h;
    c.d = d;
    c.m = m;
    c.r_min = r_min;
    c.r_max = r_max;
    c.attn_scale = attn_scale;
    return c;
  }
};

inline void validate(const TrainConfig& c) {
  require(std::isfinite(c.learning_rate) && c.learning_rate >= 0.0, ErrorKind::invalid_argument,
          "learning_rate must be >= 0");
  require(c.batch_size >= 1, ErrorKind::invalid_argument, "batch_size must be >= 1");
  require(c.k >= 1, ErrorKind::invalid_argument, "k must be >= 1");
  validate(c.margins);
  validate(c.model(1, 1));
  require(std::isfinite(c.gamma_b) && c.gamma_b >= 0.0, ErrorKind::invalid_argument, "gamma_b must be >= 0");
}

// Workers are an execution detail and are left out on purpose: results do not
// depend on them.
inline nlohmann::ordered_json to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["learning_rate"] = c.learning_rate;
  j["batch_size"] = c.batch_size;
  j["epochs"] = c.epochs;
  j["seed"] = c.seed;
  j["h"] = c.h;
  j["d"] = c.d;
  j["m"] = c.m;
  j["r_min"] = c.r_min;
  j["r_max"] = c.r_max;
  j["attn_scale"] = c.attn_scale;
  j["k"] = c.k;
  j["margins"] = {{"g1", c.margins.g1}, {"g2", c.margins.g2}, {"g3", c.margins.g3},
                  {"g4", c.margins.g4}, {"g5", c.margins.g5}, {"g6", c.margins.g6}};
  j["gamma_b"] = c.gamma_b;
  j["toggles"] = {{"use_l_query", c.toggles.use_l_query},
                  {"use_l_prop", c.toggles.use_l_prop},
                  {"use_l_rank_query", c.toggles.use_l_rank_query},
                  {"use_l_rank_prop", c.toggles.use_l_rank_prop}};
  j["stop_gradient_branches"] = c.stop_gradient_branches;
  return j;
}

// Overlays the keys present in `j` onto `c`. Unknown keys are rejected.
inline void apply_json(TrainConfig& c, const nlohmann::json& j) {
  require(j.is_object(), ErrorKind::invalid_argument, "train config must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& k = it.key();
    const auto& v = it.value();
    if (k == "learning_rate") c.learning_rate = v.get<double>();
    else if (k == "batch_size") c.batch_size = v.get<std::uint32_t>();
    else if (k == "epochs") c.epochs = v.get<std::uint32_t>();
    else if (k == "seed") c.seed = v.get<std::uint64_t>();
    else if (k == "h") c.h = v.get<std::uint32_t>();
    else if (k == "d") c.d = v.get<std::uint32_t>();
    else if (k == "m") c.m = v.get<std::uint32_t>();
    else if (k == "r_min") c.r_min = v.get<double>();
    else if (k == "r_max") c.r_max = v.get<double>();
    else if (k == "attn_scale") c.attn_scale = v.get<double>();
    else if (k == "k") c.k = v.get<std::uint32_t>();
    else if (k == "gamma_b") c.gamma_b = v.get<double>();
    else if (k == "stop_gradient_branches") c.stop_gradient_branches = v.get<bool>();
    else if (k == "workers") c.workers = v.get<unsigned>();
    else if (k == "margins") {
      for (auto m = v.begin(); m != v.end(); ++m) {
        double* dst = m.key() == "g1"   ? &c.margins.g1
                      : m.key() == "g2" ? &c.margins.g2
                      : m.key() == "g3" ? &c.margins.g3
                      : m.key() == "g4" ? &c.margins.g4
                      : m.key() == "g5" ? &c.margins.g5
                      : m.key() == "g6" ? &c.margins.g6
                                        : nullptr;
        require(dst != nullptr, ErrorKind::invalid_argument, "unknown margin '" + m.key() + "'");
        *dst = m.value().get<double>();
      }
    } else if (k == "toggles") {
      for (auto t = v.begin(); t != v.end(); ++t) {
        bool* dst = t.key() == "use_l_query"        ? &c.toggles.use_l_query
                    : t.key() == "use_l_prop"       ? &c.toggles.use_l_prop
                    : t.key() == "use_l_rank_query" ? &c.toggles.use_l_rank_query
                    : t.key() == "use_l_rank_prop"  ? &c.toggles.use_l_rank_prop
                                                    : nullptr;
        require(dst != nullptr, ErrorKind::invalid_argument, "unknown toggle '" + t.key() + "'");
        *dst = t.value().get<bool>();
      }
    } else {
      throw Error(ErrorKind::invalid_argument, "unknown train config key '" + k + "'");
    }
  }
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  ModelParams m1;
  ModelParams m2;
  std::uint64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState like(const ModelParams& p) { return {ModelParams::zeros(p.cfg), ModelParams::zeros(p.cfg)}; }
};

inline void adam_update(ModelParams& params, const ModelParams& grads, AdamState& st, double lr) {
  require(params.same_shape(grads) && params.same_shape(st.m1) && params.same_shape(st.m2),
          ErrorKind::dimension_mismatch, "adam_update: shape mismatch");
  ++st.step;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  auto P = params.blocks();
  auto G = grads.blocks();
  auto M = st.m1.blocks();
  auto V = st.m2.blocks();
  for (std::size_t b = 0; b < ModelParams::kBlocks; ++b) {
    double* p = P[b]->data();
    const double* g = G[b]->data();
    double* m = M[b]->data();
    double* v = V[b]->data();
    for (Eigen::Index i = 0; i < P[b]->size(); ++i) {
      m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * g[i];
      v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * g[i] * g[i];
      const double mh = m[i] / bc1;
      const double vh = v[i] / bc2;
      p[i] -= lr * mh / (std::sqrt(vh) + st.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

enum class Dtype : std::uint32_t { f32 = 1, f64 = 2 };

struct Checkpoint {
  ModelParams params;
  std::optional<AdamState> adam;
  std::uint32_t epochs_done = 0;
  std::string config_json;

  bool operator==(const Checkpoint& o) const {
    if (!(params == o.params) || epochs_done != o.epochs_done || config_json != o.config_json) return false;
    if (adam.has_value() != o.adam.has_value()) return false;
    return !adam || (adam->step == o.adam->step && adam->m1 == o.adam->m1 && adam->m2 == o.adam->m2);
  }
};

namespace detail {

inline void write_blocks(bin::Writer& w, const ModelParams& p, Dtype dt) {
  auto blocks = p.blocks();
  w.put<std::uint32_t>(ModelParams::kBlocks);
  for (std::size_t b = 0; b < ModelParams::kBlocks; ++b) {
    w.str(ModelParams::kNames[b]);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(blocks[b]->rows()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(blocks[b]->cols()));
    const std::span<const double> data(blocks[b]->data(), static_cast<std::size_t>(blocks[b]->size()));
    if (dt == Dtype::f32)
      w.array<float>(data);
    else
      w.array<double>(data);
  }
}

inline void read_blocks(bin::Reader& r, ModelParams& p, Dtype dt) {
  const auto n = r.get<std::uint32_t>();
  require(n == ModelParams::kBlocks, ErrorKind::dimension_mismatch,
          "checkpoint has " + std::to_string(n) + " parameter blocks, expected " +
              std::to_string(ModelParams::kBlocks));
  auto blocks = p.blocks();
  for (std::size_t b = 0; b < ModelParams::kBlocks; ++b) {
    const auto name = r.str();
    require(name == ModelParams::kNames[b], ErrorKind::invalid_argument,
            "checkpoint block '" + name + "' where '" + ModelParams::kNames[b] + "' was expected");
    const auto rows = r.get<std::uint32_t>();
    const auto cols = r.get<std::uint32_t>();
    require(rows == blocks[b]->rows() && cols == blocks[b]->cols(), ErrorKind::dimension_mismatch,
            "checkpoint block " + name + " has shape " + std::to_string(rows) + "x" + std::to_string(cols));
    const std::size_t width = dt == Dtype::f32 ? sizeof(float) : sizeof(double);
    require(r.remaining() >= width * rows * cols, ErrorKind::truncated, "checkpoint block " + name + " truncated");
    for (Eigen::Index i = 0; i < blocks[b]->size(); ++i)
      blocks[b]->data()[i] = dt == Dtype::f32 ? static_cast<double>(r.get<float>()) : r.get<double>();
  }
  check_finite(p);
}

}  // namespace detail

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::string& path, const Checkpoint& ck, Dtype dt = Dtype::f64) {
  check_finite(ck.params);
  const auto& c = ck.params.cfg;
  bin::Writer w(path);
  w.magic("PSMC");
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(dt));
  for (auto v : {c.d_w, c.d_v, c.h, c.d, c.m}) w.put<std::uint32_t>(v);
  w.put<double>(c.r_min);
  w.put<double>(c.r_max);
  w.put<double>(c.attn_scale);
  detail::write_blocks(w, ck.params, dt);
  w.put<std::uint8_t>(ck.adam ? 1 : 0);
  if (ck.adam) {
    w.put<std::uint64_t>(ck.adam->step);
    w.put<std::uint32_t>(ck.epochs_done);
    detail::write_blocks(w, ck.adam->m1, dt);
    detail::write_blocks(w, ck.adam->m2, dt);
  }
  w.str(ck.config_json);
  w.close();
}

inline Checkpoint load_checkpoint(const std::string& path) {
  bin::Reader r(path);
  r.expect_magic("PSMC");
  const auto version = r.get<std::uint32_t>();
  require(version == kCheckpointVersion, ErrorKind::bad_magic, "unsupported checkpoint version in " + path);
  const auto dt_raw = r.get<std::uint32_t>();
  require(dt_raw == 1 || dt_raw == 2, ErrorKind::invalid_argument, "unknown checkpoint dtype in " + path);
  const auto dt = static_cast<Dtype>(dt_raw);
  ModelConfig c;
  c.d_w = r.get<std::uint32_t>();
  c.d_v = r.get<std::uint32_t>();
  c.h = r.get<std::uint32_t>();
  c.d = r.get<std::uint32_t>();
  c.m = r.get<std::uint32_t>();
  c.r_min = r.get<double>();
  c.r_max = r.get<double>();
  c.attn_scale = r.get<double>();
  Checkpoint ck;
  ck.params = ModelParams::zeros(c);
  detail::read_blocks(r, ck.params, dt);
  if (r.get<std::uint8_t>() != 0) {
    AdamState st = AdamState::like(ck.params);
    st.step = r.get<std::uint64_t>();
    ck.epochs_done = r.get<std::uint32_t>();
    detail::read_blocks(r, st.m1, dt);
    detail::read_blocks(r, st.m2, dt);
    ck.adam = std::move(st);
  }
  ck.config_json = r.str();
  require(r.remaining() == 0, ErrorKind::truncated, "trailing bytes in checkpoint " + path);
  return ck;
}

// ---------------------------------------------------------------------------
// Training

struct StepStats {
  std::uint64_t step = 0;  // Adam step after the update
  std::uint32_t epoch = 0;
  std::uint32_t batch = 0;
  LossBreakdown mean;  // selected_proposal: most frequent selection (lowest index on ties)
};

inline nlohmann::ordered_json to_json(const LossBreakdown& b) {
  nlohmann::ordered_json j;
  j["l_query"] = b.l_query;
  j["l_prop"] = b.l_prop;
  j["l_cl"] = b.l_cl;
  j["l_query_n"] = b.l_query_n;
  j["l_prop_n"] = b.l_prop_n;
  j["l_rank_query"] = b.l_rank_query;
  j["l_rank_prop"] = b.l_rank_prop;
  j["l_rank"] = b.l_rank;
  j["l_base"] = b.l_base;
  j["total"] = b.total;
  j["selected_proposal"] = b.selected_proposal;
  return j;
}

inline nlohmann::ordered_json to_json(const StepStats& s) {
  nlohmann::ordered_json j;
  j["step"] = s.step;
  j["epoch"] = s.epoch;
  j["batch"] = s.batch;
  const auto m = to_json(s.mean);
  for (auto it = m.begin(); it != m.end(); ++it) j[it.key()] = it.value();
  return j;
}

inline std::mt19937_64 anchor_rng(std::uint64_t seed, std::uint32_t epoch, std::uint32_t anchor) {
  return std::mt19937_64(derive_seed(seed, 0xA7C4, epoch, anchor));
}

// Epoch permutation of 0..n-1 (Fisher-Yates on a seeded stream).
inline std::vector<std::uint32_t> epoch_order(std::uint64_t seed, std::uint32_t epoch, std::uint32_t n) {
  std::vector<std::uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0u);
  std::mt19937_64 rng(derive_seed(seed, 0x5EED, epoch));
  for (std::uint32_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::uint32_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(rng)]);
  }
  return order;
}

// One optimizer step over `batch`. Gradients are summed in ascending anchor-id
// order and divided by the batch size, so the update does not depend on the
// order of `batch` or on the worker count.
inline StepStats train_step(ModelParams& params, AdamState& adam, std::vector<std::uint32_t> batch, const Corpus& corpus,
                            const MiningIndex& index, const TrainConfig& cfg, std::uint32_t epoch) {
  require(!batch.empty(), ErrorKind::invalid_argument, "empty batch");
  require(index.n == corpus.size(), ErrorKind::dimension_mismatch, "mining index and corpus differ in size");
  std::sort(batch.begin(), batch.end());
  const LossConfig lc = cfg.loss();

  std::vector<GradResult> slots(batch.size());
  parallel_for(batch.size(), cfg.workers, [&](std::size_t i) {
    const auto a = batch[i];
    auto rng = anchor_rng(cfg.seed, epoch, a);
    const auto pair = draw_training_pair(index, a, rng);
    slots[i] = grad_total(params, corpus[a], corpus[pair.sim_id], corpus[pair.dis_id], lc);
  });

  ModelParams g = ModelParams::zeros(params.cfg);
  LossBreakdown mean;
  std::vector<std::uint32_t> picks(params.cfg.m, 0);
  for (const auto& s : slots) {
    auto G = g.blocks();
    auto S = s.grad.blocks();
    for (std::size_t b = 0; b < ModelParams::kBlocks; ++b) *G[b] += *S[b];
    const auto& br = s.breakdown;
    mean.l_query += br.l_query;
    mean.l_prop += br.l_prop;
    mean.l_cl += br.l_cl;
    mean.l_query_n += br.l_query_n;
    mean.l_prop_n += br.l_prop_n;
    mean.l_rank_query += br.l_rank_query;
    mean.l_rank_prop += br.l_rank_prop;
    mean.l_rank += br.l_rank;
    mean.l_base += br.l_base;
    mean.total += br.total;
    ++picks[br.selected_proposal];
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (auto* b : g.blocks()) *b *= inv;
  for (double* f : {&mean.l_query, &mean.l_prop, &mean.l_cl, &mean.l_query_n, &mean.l_prop_n, &mean.l_rank_query,
                    &mean.l_rank_prop, &mean.l_rank, &mean.l_base, &mean.total})
    *f *= inv;
  mean.selected_proposal = static_cast<std::uint32_t>(std::max_element(picks.begin(), picks.end()) - picks.begin());

  adam_update(params, g, adam, cfg.learning_rate);
  return {adam.step, epoch, 0, mean};
}

struct TrainHooks {
  std::function<void(const StepStats&)> on_step;
  std::function<void(const Checkpoint&)> on_epoch;
};

// Runs epochs [resume.epochs_done, cfg.epochs). Without `resume`, starts from
// init_params(model config, cfg.seed).
inline Checkpoint train(const Corpus& corpus, const MiningIndex& index, const TrainConfig& cfg,
                        const std::optional<Checkpoint>& resume = std::nullopt, const TrainHooks& hooks = {}) {
  validate(cfg);
  validate(index);
  require(corpus.size() >= 1, ErrorKind::invalid_argument, "empty corpus");
  require(index.n == corpus.size(), ErrorKind::dimension_mismatch, "mining index and corpus differ in size");
  const auto n = static_cast<std::uint32_t>(corpus.size());

  Checkpoint ck;
  ck.config_json = to_json(cfg).dump();
  if (resume) {
    require(resume->adam.has_value(), ErrorKind::invalid_argument, "resume checkpoint carries no optimizer state");
    require(resume->params.cfg == cfg.model(corpus.d_w, corpus.d_v), ErrorKind::dimension_mismatch,
            "resume checkpoint model shape differs from the configuration");
    ck.params = resume->params;
    ck.adam = resume->adam;
    ck.epochs_done = resume->epochs_done;
  } else {
    ck.params = init_params(cfg.model(corpus.d_w, corpus.d_v), cfg.seed);
    ck.adam = AdamState::like(ck.params);
  }

  for (std::uint32_t epoch = ck.epochs_done; epoch < cfg.epochs; ++epoch) {
    const auto order = epoch_order(cfg.seed, epoch, n);
    std::uint32_t b = 0;
    for (std::uint32_t start = 0; start < n; start += cfg.batch_size, ++b) {
      const std::uint32_t end = std::min(n, start + cfg.batch_size);
      std::vector<std::uint32_t> batch(order.begin() + start, order.begin() + end);
      auto st = train_step(ck.params, *ck.adam, std::move(batch), corpus, index, cfg, epoch);
      st.batch = b;
      if (hooks.on_step) hooks.on_step(st);
    }
    ck.epochs_done = epoch + 1;
    if (hooks.on_epoch) hooks.on_epoch(ck);
  }
  return ck;
}

}  // namespace psm
