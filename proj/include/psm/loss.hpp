#pragma once

// Contrastive and rank losses over mined similar/dissimilar samples, the
// base-loss surrogate, min-loss proposal selection and the analytic gradient
// of the total objective, plus a central-difference verifier.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "psm/common.hpp"
#include "psm/model.hpp"

namespace psm {

struct Margins {
  double g1 = 0.5;  // query contrastive
  double g2 = 0.5;  // proposal contrastive
  double g3 = 0.5;  // query contrastive, negative proposal
  double g4 = 0.5;  // proposal contrastive, negative proposal
  double g5 = 0.15; // query rank
  double g6 = 0.15; // proposal rank

  bool operator==(const Margins&) const = default;
};

inline void validate(const Margins& m) {
  for (double g : {m.g1, m.g2, m.g3, m.g4, m.g5, m.g6})
    require(std::isfinite(g) && g >= 0.0, ErrorKind::invalid_argument, "margins must be finite and >= 0");
}

struct LossToggles {
  bool use_l_query = true;
  bool use_l_prop = true;
  bool use_l_rank_query = true;
  bool use_l_rank_prop = true;

  static LossToggles all_off() { return {false, false, false, false}; }
  bool any() const { return use_l_query || use_l_prop || use_l_rank_query || use_l_rank_prop; }
  bool operator==(const LossToggles&) const = default;
};

// Alignment objective used for training and for ranking proposals at
// inference. Lower is better.
class BaseLoss {
 public:
  virtual ~BaseLoss() = default;
  virtual double value(const RowVec& p, const RowVec& p_n, const RowVec& q) const = 0;
  // Adds scale * d(value)/d(.) into dp, dpn, dq.
  virtual void accumulate_grad(const RowVec& p, const RowVec& p_n, const RowVec& q, double scale, RowVec& dp,
                               RowVec& dpn, RowVec& dq) const = 0;
  // Discrete state that makes value() non-smooth (for finite-difference checks).
  virtual int signature(const RowVec&, const RowVec&, const RowVec&) const { return 0; }
  // Distance of the inputs to the nearest non-smooth point.
  virtual double kink_distance(const RowVec&, const RowVec&, const RowVec&) const {
    return std::numeric_limits<double>::infinity();
  }
};

inline double hinge(double x, double gamma) { return std::max(x + gamma, 0.0); }
// Subgradient convention: 0 at the kink.
inline bool hinge_active(double x, double gamma) { return x + gamma > 0.0; }

// (1 - p.q) + hinge(p_n.q - p.q, gamma_b)
class SurrogateBaseLoss final : public BaseLoss {
 public:
  explicit SurrogateBaseLoss(double gamma_b = 0.3) : gamma_b_(gamma_b) {
    require(std::isfinite(gamma_b) && gamma_b >= 0.0, ErrorKind::invalid_argument, "gamma_b must be >= 0");
  }

  double gamma() const { return gamma_b_; }

  double value(const RowVec& p, const RowVec& p_n, const RowVec& q) const override {
    check_dims(p, p_n, q);
    const double pq = p.dot(q);
    return (1.0 - pq) + hinge(p_n.dot(q) - pq, gamma_b_);
  }

  void accumulate_grad(const RowVec& p, const RowVec& p_n, const RowVec& q, double scale, RowVec& dp, RowVec& dpn,
                       RowVec& dq) const override {
    dp -= scale * q;
    dq -= scale * p;
    if (hinge_active(p_n.dot(q) - p.dot(q), gamma_b_)) {
      dpn += scale * q;
      dp -= scale * q;
      dq += scale * (p_n - p);
    }
  }

  int signature(const RowVec& p, const RowVec& p_n, const RowVec& q) const override {
    return hinge_active(p_n.dot(q) - p.dot(q), gamma_b_) ? 1 : 0;
  }

  double kink_distance(const RowVec& p, const RowVec& p_n, const RowVec& q) const override {
    return std::abs(p_n.dot(q) - p.dot(q) + gamma_b_);
  }

 private:
  static void check_dims(const RowVec& p, const RowVec& p_n, const RowVec& q) {
    require(p.size() == q.size() && p_n.size() == q.size(), ErrorKind::dimension_mismatch,
            "base loss vectors differ in dimension");
  }
  double gamma_b_;
};

inline double base_loss(const RowVec& p, const RowVec& p_n, const RowVec& q, double gamma_b = 0.3) {
  return SurrogateBaseLoss(gamma_b).value(p, p_n, q);
}

struct LossConfig {
  Margins margins;
  double gamma_b = 0.3;
  LossToggles toggles;
  bool stop_gradient_branches = false;
  std::shared_ptr<const BaseLoss> base;  // null: SurrogateBaseLoss(gamma_b)
};

// Base loss selected by `cfg`; `fallback` holds the default surrogate.
inline const BaseLoss& resolve_base(const LossConfig& cfg, std::optional<SurrogateBaseLoss>& fallback) {
  if (cfg.base) return *cfg.base;
  fallback.emplace(cfg.gamma_b);
  return *fallback;
}

struct LossBreakdown {
  double l_query = 0.0;
  double l_prop = 0.0;
  double l_cl = 0.0;
  double l_query_n = 0.0;
  double l_prop_n = 0.0;
  double l_rank_query = 0.0;
  double l_rank_prop = 0.0;
  double l_rank = 0.0;
  double l_base = 0.0;
  double total = 0.0;
  std::uint32_t selected_proposal = 0;

  bool operator==(const LossBreakdown&) const = default;
};

struct ContrastivePair {
  double l_q = 0.0;
  double l_p = 0.0;
};

inline ContrastivePair contrastive_losses(const RowVec& f, const RowVec& q_sim, const RowVec& q_dis,
                                          const RowVec& p_sim, const RowVec& p_dis, double gamma_q, double gamma_p) {
  const auto d = f.size();
  require(q_sim.size() == d && q_dis.size() == d && p_sim.size() == d && p_dis.size() == d,
          ErrorKind::dimension_mismatch, "contrastive loss vectors differ in dimension");
  return {hinge(f.dot(q_dis) - f.dot(q_sim), gamma_q), hinge(f.dot(p_dis) - f.dot(p_sim), gamma_p)};
}

struct ContrastiveResult {
  double l_query = 0.0;
  double l_prop = 0.0;
  double l_cl = 0.0;
};

inline ContrastiveResult psm_contrastive(const FeatureBundle& b, std::size_t proposal_idx, const Margins& m) {
  require(proposal_idx < b.proposals().size(), ErrorKind::out_of_range, "proposal index out of range");
  instrumentation().psm_loss_calls.fetch_add(1, std::memory_order_relaxed);
  auto c = contrastive_losses(b.proposals()[proposal_idx].pos_feat, b.q_sim(), b.q_dis(), b.p_sim(), b.p_dis(), m.g1,
                              m.g2);
  return {c.l_q, c.l_p, c.l_q + c.l_p};
}

struct RankResult {
  double l_rank_query = 0.0;
  double l_rank_prop = 0.0;
  double l_rank = 0.0;
};

inline RankResult psm_rank(double l_query, double l_prop, double l_query_n, double l_prop_n, const Margins& m) {
  instrumentation().psm_loss_calls.fetch_add(1, std::memory_order_relaxed);
  RankResult r;
  r.l_rank_query = hinge(l_query - l_query_n, m.g5);
  r.l_rank_prop = hinge(l_prop - l_prop_n, m.g6);
  r.l_rank = r.l_rank_query + r.l_rank_prop;
  return r;
}

// Ascending base loss, ties by head index.
inline std::vector<std::uint32_t> rank_by_score(const std::vector<double>& scores) {
  std::vector<std::uint32_t> order(scores.size());
  for (std::uint32_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  return order;
}

inline std::vector<double> proposal_base_losses(const std::vector<Proposal>& props, const RowVec& q,
                                                const BaseLoss& base) {
  std::vector<double> out;
  out.reserve(props.size());
  for (const auto& pr : props) out.push_back(base.value(pr.pos_feat, pr.neg_feat, q));
  return out;
}

namespace detail {

struct LossState {
  LossBreakdown br;
  // raw hinge terms, independent of toggles
  double raw_q = 0, raw_p = 0, raw_qn = 0, raw_pn = 0;
  bool act_q = false, act_p = false, act_qn = false, act_pn = false, act_rq = false, act_rp = false;
  double kink = 0;  // smallest |hinge argument| or proposal-selection gap
};

inline LossState evaluate(const FeatureBundle& b, const LossConfig& cfg) {
  const auto& props = b.proposals();
  require(!props.empty(), ErrorKind::invalid_argument, "bundle has no proposals");
  validate(cfg.margins);
  const auto& m = cfg.margins;
  const auto& tg = cfg.toggles;
  LossState s;
  auto& br = s.br;

  std::optional<SurrogateBaseLoss> fb;
  const auto base = proposal_base_losses(props, b.q(), resolve_base(cfg, fb));
  br.selected_proposal = static_cast<std::uint32_t>(std::min_element(base.begin(), base.end()) - base.begin());
  br.l_base = base[br.selected_proposal];

  const auto& sel = props[br.selected_proposal];
  const auto pos = psm_contrastive(b, br.selected_proposal, m);
  const auto neg = contrastive_losses(sel.neg_feat, b.q_sim(), b.q_dis(), b.p_sim(), b.p_dis(), m.g3, m.g4);
  s.raw_q = pos.l_query;
  s.raw_p = pos.l_prop;
  s.raw_qn = neg.l_q;
  s.raw_pn = neg.l_p;
  s.act_q = hinge_active(sel.pos_feat.dot(b.q_dis()) - sel.pos_feat.dot(b.q_sim()), m.g1);
  s.act_p = hinge_active(sel.pos_feat.dot(b.p_dis()) - sel.pos_feat.dot(b.p_sim()), m.g2);
  s.act_qn = hinge_active(sel.neg_feat.dot(b.q_dis()) - sel.neg_feat.dot(b.q_sim()), m.g3);
  s.act_pn = hinge_active(sel.neg_feat.dot(b.p_dis()) - sel.neg_feat.dot(b.p_sim()), m.g4);
  const auto rank = psm_rank(s.raw_q, s.raw_p, s.raw_qn, s.raw_pn, m);
  s.act_rq = hinge_active(s.raw_q - s.raw_qn, m.g5);
  s.act_rp = hinge_active(s.raw_p - s.raw_pn, m.g6);

  s.kink = std::min({std::abs(sel.pos_feat.dot(b.q_dis()) - sel.pos_feat.dot(b.q_sim()) + m.g1),
                     std::abs(sel.pos_feat.dot(b.p_dis()) - sel.pos_feat.dot(b.p_sim()) + m.g2),
                     std::abs(sel.neg_feat.dot(b.q_dis()) - sel.neg_feat.dot(b.q_sim()) + m.g3),
                     std::abs(sel.neg_feat.dot(b.p_dis()) - sel.neg_feat.dot(b.p_sim()) + m.g4),
                     std::abs(s.raw_q - s.raw_qn + m.g5), std::abs(s.raw_p - s.raw_pn + m.g6),
                     resolve_base(cfg, fb).kink_distance(sel.pos_feat, sel.neg_feat, b.q())});
  for (std::size_t j = 0; j < base.size(); ++j)
    if (j != br.selected_proposal) s.kink = std::min(s.kink, base[j] - br.l_base);

  br.l_query = tg.use_l_query ? s.raw_q : 0.0;
  br.l_prop = tg.use_l_prop ? s.raw_p : 0.0;
  br.l_cl = br.l_query + br.l_prop;
  br.l_query_n = s.raw_qn;
  br.l_prop_n = s.raw_pn;
  br.l_rank_query = tg.use_l_rank_query ? rank.l_rank_query : 0.0;
  br.l_rank_prop = tg.use_l_rank_prop ? rank.l_rank_prop : 0.0;
  br.l_rank = br.l_rank_query + br.l_rank_prop;
  br.total = br.l_base + br.l_cl + br.l_rank;
  return s;
}

}  // namespace detail

inline LossBreakdown total_loss(const FeatureBundle& b, const LossConfig& cfg = {}) {
  return detail::evaluate(b, cfg).br;
}

inline double kink_distance(const FeatureBundle& b, const LossConfig& cfg = {}) {
  return detail::evaluate(b, cfg).kink;
}

struct GradResult {
  LossBreakdown breakdown;
  ModelParams grad;
};

// Gradient of `scale * total` w.r.t. every parameter block.
inline GradResult grad_total(const ModelParams& params, const Sample& anchor, const Sample& sim, const Sample& dis,
                             const LossConfig& cfg = {}, double scale = 1.0) {
  const FeatureBundle b = forward_bundle(params, anchor, sim, dis);
  const auto s = detail::evaluate(b, cfg);
  const auto& tg = cfg.toggles;
  const std::size_t D = params.cfg.d;
  const std::size_t j = s.br.selected_proposal;
  const auto& sel = b.proposals()[j];

  GradResult out{s.br, ModelParams::zeros(params.cfg)};
  RowVec dp = RowVec::Zero(D), dpn = RowVec::Zero(D), dq = RowVec::Zero(D);
  RowVec dq_sim = RowVec::Zero(D), dq_dis = RowVec::Zero(D), dp_sim = RowVec::Zero(D), dp_dis = RowVec::Zero(D);

  std::optional<SurrogateBaseLoss> fb;
  resolve_base(cfg, fb).accumulate_grad(sel.pos_feat, sel.neg_feat, b.q(), scale, dp, dpn, dq);

  // Effective weight on each raw hinge after toggles and the rank hinges.
  const double w_rq = (tg.use_l_rank_query && s.act_rq) ? 1.0 : 0.0;
  const double w_rp = (tg.use_l_rank_prop && s.act_rp) ? 1.0 : 0.0;
  const double w_q = ((tg.use_l_query ? 1.0 : 0.0) + w_rq) * scale;
  const double w_p = ((tg.use_l_prop ? 1.0 : 0.0) + w_rp) * scale;
  const double w_qn = -w_rq * scale;
  const double w_pn = -w_rp * scale;

  auto contrast = [&](const RowVec& f, RowVec& df, const RowVec& sim_v, RowVec& d_sim, const RowVec& dis_v,
                      RowVec& d_dis, double w) {
    if (w == 0.0) return;
    df += w * (dis_v - sim_v);
    d_dis += w * f;
    d_sim -= w * f;
  };
  if (s.act_q) contrast(sel.pos_feat, dp, b.q_sim(), dq_sim, b.q_dis(), dq_dis, w_q);
  if (s.act_p) contrast(sel.pos_feat, dp, b.p_sim(), dp_sim, b.p_dis(), dp_dis, w_p);
  if (s.act_qn) contrast(sel.neg_feat, dpn, b.q_sim(), dq_sim, b.q_dis(), dq_dis, w_qn);
  if (s.act_pn) contrast(sel.neg_feat, dpn, b.p_sim(), dp_sim, b.p_dis(), dp_dis, w_pn);

  auto& g = out.grad;
  {
    std::vector<RowVec> d_pos(j + 1), d_neg(j + 1);
    d_pos[j] = dp;
    d_neg[j] = dpn;
    RowVec du = propose_backward(params, b.anchor.video, d_pos, d_neg, g);
    encode_query_backward(params, b.anchor.query, dq, du, g);
  }
  if (!cfg.stop_gradient_branches) {
    auto branch = [&](const SampleForward& f, const RowVec& dqb, const RowVec& dpb) {
      std::vector<RowVec> d_pos{dpb};
      RowVec du = propose_backward(params, f.video, d_pos, {}, g);
      encode_query_backward(params, f.query, dqb, du, g);
    };
    branch(b.sim, dq_sim, dp_sim);
    branch(b.dis, dq_dis, dp_dis);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Finite-difference verification

// Discrete state of the forward/loss graph. Central differences are only
// meaningful when it is the same at theta - eps and theta + eps.
inline std::vector<int> activation_signature(const FeatureBundle& b, const LossConfig& cfg) {
  const auto s = detail::evaluate(b, cfg);
  const auto& sel = b.proposals()[s.br.selected_proposal];
  std::optional<SurrogateBaseLoss> fb;
  std::vector<int> sig{static_cast<int>(s.br.selected_proposal),
                       resolve_base(cfg, fb).signature(sel.pos_feat, sel.neg_feat, b.q()),
                       s.act_q,
                       s.act_p,
                       s.act_qn,
                       s.act_pn,
                       s.act_rq,
                       s.act_rp};
  for (const auto* v : {&b.anchor.video, &b.sim.video, &b.dis.video})
    for (const auto& hc : v->heads) {
      sig.push_back(static_cast<int>(hc.neg.argmax));
      sig.push_back(hc.neg.uniform);
    }
  return sig;
}

struct FdReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;        // coordinates compared
  std::size_t excluded_kink = 0;  // coordinates whose +-eps probes straddle a kink
  std::size_t worst_block = 0;
  std::size_t worst_index = 0;
};

inline FdReport fd_check(const ModelParams& params, const Sample& anchor, const Sample& sim, const Sample& dis,
                         const LossConfig& cfg = {}, double eps = 1e-4) {
  require(eps > 0.0, ErrorKind::invalid_argument, "fd_check needs eps > 0");
  const auto analytic = grad_total(params, anchor, sim, dis, cfg).grad;
  const auto base_sig = activation_signature(forward_bundle(params, anchor, sim, dis), cfg);

  FdReport rep;
  ModelParams probe = params;
  auto pb = probe.blocks();
  auto ab = analytic.blocks();
  for (std::size_t bi = 0; bi < ModelParams::kBlocks; ++bi) {
    for (Eigen::Index k = 0; k < pb[bi]->size(); ++k) {
      double& theta = pb[bi]->data()[k];
      const double orig = theta;
      theta = orig + eps;
      const auto fp = forward_bundle(probe, anchor, sim, dis);
      const double lp = total_loss(fp, cfg).total;
      const auto sig_p = activation_signature(fp, cfg);
      theta = orig - eps;
      const auto fm = forward_bundle(probe, anchor, sim, dis);
      const double lm = total_loss(fm, cfg).total;
      const auto sig_m = activation_signature(fm, cfg);
      theta = orig;
      if (sig_p != base_sig || sig_m != base_sig) {
        ++rep.excluded_kink;
        continue;
      }
      const double num = (lp - lm) / (2.0 * eps);
      const double ana = ab[bi]->data()[k];
      if (std::abs(ana) + std::abs(num) <= 1e-8) continue;
      ++rep.checked;
      const double rel = std::abs(ana - num) / std::max(std::abs(ana), std::abs(num));
      if (rel > rep.max_rel_error) {
        rep.max_rel_error = rel;
        rep.worst_block = bi;
        rep.worst_index = static_cast<std::size_t>(k);
      }
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Seeded suite of random configurations

struct GradcheckConfig {
  std::uint32_t trials = 100;
  std::uint64_t seed = 7;
  std::uint32_t h = 4, d = 4, T = 5, m = 2;
  std::uint32_t d_w = 3, d_v = 3, L = 3;
  double eps = 1e-4;
  double tolerance = 1e-4;
  double kink_margin = 1e-6;  // configurations this close to a kink are skipped
  LossToggles toggles;        // all on
};

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::uint32_t worst_trial = 0;
  std::string worst_block;
  std::uint32_t trials_checked = 0;
  std::uint32_t trials_near_kink = 0;
  std::uint32_t trials_over_tolerance = 0;
  std::size_t coordinates = 0;
  std::size_t excluded_coordinates = 0;
  std::vector<double> per_trial;  // NaN for skipped trials

  bool pass(double tol) const { return trials_checked > 0 && max_rel_error < tol; }
};

namespace detail {

inline Sample random_sample(std::mt19937_64& rng, std::uint32_t id, std::uint32_t L, std::uint32_t T,
                            std::uint32_t d_w, std::uint32_t d_v) {
  std::normal_distribution<double> n(0.0, 1.0);
  Sample s;
  s.id = id;
  s.query_text = "q" + std::to_string(id);
  s.word_feats = FeatureMatrix(L, d_w);
  s.video_feats = FeatureMatrix(T, d_v);
  for (auto& v : s.word_feats.data) v = static_cast<float>(n(rng));
  for (auto& v : s.video_feats.data) v = static_cast<float>(n(rng));
  s.duration = 10.0;
  return s;
}

}  // namespace detail

// Trial t: params = init_params(cfg, derive_seed(seed, t, 0)), three samples of
// standard normal features drawn from derive_seed(seed, t, 1).
inline GradcheckResult run_gradcheck(const GradcheckConfig& gc, unsigned workers = 1) {
  require(gc.trials >= 1, ErrorKind::invalid_argument, "gradcheck needs at least one trial");
  require(gc.eps > 0.0, ErrorKind::invalid_argument, "gradcheck needs eps > 0");
  ModelConfig mc;
  mc.d_w = gc.d_w;
  mc.d_v = gc.d_v;
  mc.h = gc.h;
  mc.d = gc.d;
  mc.m = gc.m;
  validate(mc);
  LossConfig lc;
  lc.toggles = gc.toggles;

  struct Trial {
    bool near_kink = false;
    FdReport rep;
  };
  std::vector<Trial> trials(gc.trials);
  parallel_for(gc.trials, workers, [&](std::size_t t) {
    std::mt19937_64 rng(derive_seed(gc.seed, t, 1));
    const auto p = init_params(mc, derive_seed(gc.seed, t, 0));
    const auto a = detail::random_sample(rng, 0, gc.L, gc.T, gc.d_w, gc.d_v);
    const auto s = detail::random_sample(rng, 1, gc.L, gc.T, gc.d_w, gc.d_v);
    const auto d = detail::random_sample(rng, 2, gc.L, gc.T, gc.d_w, gc.d_v);
    if (kink_distance(forward_bundle(p, a, s, d), lc) < gc.kink_margin) {
      trials[t].near_kink = true;
      return;
    }
    trials[t].rep = fd_check(p, a, s, d, lc, gc.eps);
  });

  GradcheckResult r;
  for (std::uint32_t t = 0; t < gc.trials; ++t) {
    const auto& tr = trials[t];
    if (tr.near_kink) {
      ++r.trials_near_kink;
      r.per_trial.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    ++r.trials_checked;
    r.per_trial.push_back(tr.rep.max_rel_error);
    r.coordinates += tr.rep.checked;
    r.excluded_coordinates += tr.rep.excluded_kink;
    if (tr.rep.max_rel_error >= gc.tolerance) ++r.trials_over_tolerance;
    if (tr.rep.max_rel_error > r.max_rel_error || r.trials_checked == 1) {
      r.max_rel_error = tr.rep.max_rel_error;
      r.worst_trial = t;
      r.worst_block = ModelParams::kNames[tr.rep.worst_block];
    }
  }
  return r;
}

}  // namespace psm
