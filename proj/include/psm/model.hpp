#pragma once

// Minimal differentiable grounding model.
//
// Query:    u = tanh(mean(words) W_qw + b_qw),  q = normalize(u W_out + b_out)
// Video:    U = V W_v + b_v,  vbar = mean_t U
// Position: z_t = U_t W_out + b_out,  q_a = normalize(u W_out + b_out)
//           s_t = kappa * cos(z_t, q_a),  alpha = softmax(s),
//           tau_bar = sum_t alpha_t tau_t,  ell = logit(tau_bar)
// Head j:   c_j = sigmoid(A_c[j] . [vbar; u] + b_c[j] + pos_j * ell)
//           r_j = r_min + (r_max - r_min) sigmoid(A_r[j] . [vbar; u] + b_r[j])
//           g_j = gaussian_weights(c_j, r_j, T),  h_j = negative_weights(g_j)
//           p_j = normalize(g_j^T U W_out + b_out), p_n_j likewise with h_j
//
// All arithmetic is double precision. Every forward result keeps the
// intermediates its backward pass needs.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "psm/common.hpp"
#include "psm/corpus.hpp"

namespace psm {

using RowVec = Eigen::RowVectorXd;

struct ModelConfig {
  std::uint32_t d_w = 0;
  std::uint32_t d_v = 0;
  std::uint32_t h = 64;
  std::uint32_t d = 256;
  std::uint32_t m = 3;
  double r_min = 0.02;
  double r_max = 0.45;
  double attn_scale = 10.0;  // kappa

  bool operator==(const ModelConfig&) const = default;
};

inline void validate(const ModelConfig& c) {
  require(c.d_w >= 1 && c.d_v >= 1 && c.h >= 1 && c.d >= 1, ErrorKind::invalid_argument,
          "model dimensions must be >= 1");
  require(c.m >= 1, ErrorKind::invalid_argument, "model needs at least one proposal head");
  require(0.0 < c.r_min && c.r_min < c.r_max && c.r_max <= 1.0, ErrorKind::invalid_argument,
          "need 0 < r_min < r_max <= 1");
  require(std::isfinite(c.attn_scale) && c.attn_scale >= 0.0, ErrorKind::invalid_argument,
          "attn_scale must be finite and >= 0");
}

struct ModelParams {
  static constexpr std::size_t kBlocks = 11;
  static constexpr std::array<const char*, kBlocks> kNames = {
      "W_qw", "b_qw", "W_v", "b_v", "W_out", "b_out", "head_c_w", "head_c_b", "head_w_w", "head_w_b", "head_pos"};

  ModelConfig cfg;
  MatrixXdR W_qw, b_qw;
  MatrixXdR W_v, b_v;
  MatrixXdR W_out, b_out;
  MatrixXdR head_c_w, head_c_b;
  MatrixXdR head_w_w, head_w_b;
  MatrixXdR head_pos;

  std::array<MatrixXdR*, kBlocks> blocks() {
    return {&W_qw, &b_qw, &W_v, &b_v, &W_out, &b_out, &head_c_w, &head_c_b, &head_w_w, &head_w_b, &head_pos};
  }
  std::array<const MatrixXdR*, kBlocks> blocks() const {
    return {&W_qw, &b_qw, &W_v, &b_v, &W_out, &b_out, &head_c_w, &head_c_b, &head_w_w, &head_w_b, &head_pos};
  }

  static ModelParams zeros(const ModelConfig& c) {
    validate(c);
    ModelParams p;
    p.cfg = c;
    p.W_qw = MatrixXdR::Zero(c.d_w, c.h);
    p.b_qw = MatrixXdR::Zero(1, c.h);
    p.W_v = MatrixXdR::Zero(c.d_v, c.h);
    p.b_v = MatrixXdR::Zero(1, c.h);
    p.W_out = MatrixXdR::Zero(c.h, c.d);
    p.b_out = MatrixXdR::Zero(1, c.d);
    p.head_c_w = MatrixXdR::Zero(c.m, 2 * c.h);
    p.head_c_b = MatrixXdR::Zero(1, c.m);
    p.head_w_w = MatrixXdR::Zero(c.m, 2 * c.h);
    p.head_w_b = MatrixXdR::Zero(1, c.m);
    p.head_pos = MatrixXdR::Zero(1, c.m);
    return p;
  }

  std::size_t num_values() const {
    std::size_t n = 0;
    for (auto* b : blocks()) n += static_cast<std::size_t>(b->size());
    return n;
  }

  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(num_values());
    for (auto* b : blocks()) out.insert(out.end(), b->data(), b->data() + b->size());
    return out;
  }

  void unflatten(std::span<const double> v) {
    require(v.size() == num_values(), ErrorKind::dimension_mismatch, "flat parameter vector has wrong length");
    std::size_t o = 0;
    for (auto* b : blocks()) {
      std::copy_n(v.data() + o, b->size(), b->data());
      o += static_cast<std::size_t>(b->size());
    }
  }

  void set_zero() {
    for (auto* b : blocks()) b->setZero();
  }

  bool same_shape(const ModelParams& o) const {
    auto a = blocks();
    auto b = o.blocks();
    for (std::size_t i = 0; i < kBlocks; ++i)
      if (a[i]->rows() != b[i]->rows() || a[i]->cols() != b[i]->cols()) return false;
    return true;
  }

  bool operator==(const ModelParams& o) const {
    if (!(cfg == o.cfg) || !same_shape(o)) return false;
    auto a = blocks();
    auto b = o.blocks();
    for (std::size_t i = 0; i < kBlocks; ++i)
      if (*a[i] != *b[i]) return false;
    return true;
  }
};

// Glorot-uniform weights, zero biases, position coefficients 1.
inline ModelParams init_params(const ModelConfig& c, std::uint64_t seed) {
  ModelParams p = ModelParams::zeros(c);
  auto fill = [&](MatrixXdR& w, std::size_t block, double fan_in, double fan_out) {
    std::mt19937_64 rng(derive_seed(seed, 0x1417, block));
    const double a = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> u(-a, a);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = u(rng);
  };
  fill(p.W_qw, 0, c.d_w, c.h);
  fill(p.W_v, 2, c.d_v, c.h);
  fill(p.W_out, 4, c.h, c.d);
  fill(p.head_c_w, 6, 2.0 * c.h, 1);
  fill(p.head_w_w, 8, 2.0 * c.h, 1);
  p.head_pos.setOnes();
  return p;
}

inline void check_finite(const ModelParams& p) {
  auto blocks = p.blocks();
  for (std::size_t i = 0; i < ModelParams::kBlocks; ++i)
    require(blocks[i]->allFinite(), ErrorKind::non_finite, std::string("parameter block ") + ModelParams::kNames[i] +
                                                               " contains NaN/Inf");
}

// ---------------------------------------------------------------------------
// Building blocks

inline double sigmoid(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

inline RowVec softmax(const RowVec& x) {
  RowVec e = (x.array() - x.maxCoeff()).exp();
  return e / e.sum();
}

// dx for y = softmax(x), given dy.
inline RowVec softmax_backward(const RowVec& y, const RowVec& dy) {
  return y.array() * (dy.array() - y.dot(dy));
}

inline constexpr double kDegenerateNorm = 1e-12;

struct Normalized {
  RowVec v;
  double norm = 0.0;
};

inline Normalized normalize_checked(const RowVec& z, const char* what) {
  const double n = z.norm();
  require(std::isfinite(n), ErrorKind::non_finite, std::string(what) + " is not finite");
  require(n > kDegenerateNorm, ErrorKind::degenerate, std::string(what) + " has zero norm before normalization");
  return {z / n, n};
}

// dz for v = z/|z|, given dv.
inline RowVec normalize_backward(const Normalized& f, const RowVec& dv) {
  return (dv - f.v * f.v.dot(dv)) / f.norm;
}

inline double segment_time(std::size_t t, std::size_t T) { return (static_cast<double>(t) + 0.5) / T; }

inline RowVec gaussian_weights(double c, double r, std::size_t T) {
  require(T >= 1, ErrorKind::invalid_argument, "gaussian_weights needs T >= 1");
  const double sigma = r / 3.0;
  RowVec e(T);
  for (std::size_t t = 0; t < T; ++t) {
    const double z = segment_time(t, T) - c;
    e[t] = -z * z / (2.0 * sigma * sigma);
  }
  return softmax(e);
}

inline constexpr double kUniformMaskTol = 1e-12;

struct NegativeMask {
  RowVec h;
  std::size_t argmax = 0;  // lowest index attaining max(g)
  double mass = 0.0;       // sum_t (max g - g_t)
  bool uniform = false;    // fallback taken
};

inline NegativeMask negative_mask(const RowVec& g) {
  NegativeMask out;
  const auto T = static_cast<std::size_t>(g.size());
  for (std::size_t t = 1; t < T; ++t)
    if (g[t] > g[out.argmax]) out.argmax = t;
  const double mx = g[out.argmax];
  RowVec ht = (mx - g.array()).matrix();
  out.mass = ht.sum();
  if (out.mass < kUniformMaskTol) {
    out.uniform = true;
    out.h = RowVec::Constant(T, 1.0 / T);
  } else {
    out.h = ht / out.mass;
  }
  return out;
}

inline RowVec negative_weights(const RowVec& g) { return negative_mask(g).h; }

// ---------------------------------------------------------------------------
// Forward passes

struct QueryForward {
  RowVec xbar;  // mean word feature
  RowVec u;     // hidden
  Normalized q;

  const RowVec& hidden() const { return u; }
};

inline QueryForward encode_query(const ModelParams& p, const FeatureMatrix& words) {
  require(words.rows >= 1, ErrorKind::invalid_argument, "query needs at least one word");
  require(words.cols == p.cfg.d_w, ErrorKind::dimension_mismatch, "word feature width != d_w");
  QueryForward f;
  f.xbar = words.to_double().colwise().mean();
  f.u = (f.xbar * p.W_qw + p.b_qw).array().tanh().matrix();
  f.q = normalize_checked(f.u * p.W_out + p.b_out, "query feature");
  return f;
}

struct Proposal {
  double center = 0.0;
  double half_width = 0.0;
  RowVec pos_weights;
  RowVec neg_weights;
  RowVec pos_feat;
  RowVec neg_feat;
};

struct HeadCache {
  double center_logit = 0.0;
  double width_logit = 0.0;
  NegativeMask neg;
  Normalized pos_out;
  Normalized neg_out;
  RowVec pos_pooled;
  RowVec neg_pooled;
};

struct VideoForward {
  MatrixXdR V;  // T x d_v
  MatrixXdR U;  // T x h
  RowVec u;     // query hidden used by the heads
  Normalized qa;                 // query feature seen by the attention
  std::vector<Normalized> seg;   // per-segment output features
  RowVec vbar;
  RowVec alpha;
  double tau_bar = 0.0;
  double ell = 0.0;
  RowVec x;  // [vbar, u]
  std::vector<Proposal> proposals;
  std::vector<HeadCache> heads;

  std::size_t num_segments() const { return static_cast<std::size_t>(V.rows()); }
};

// Runs the first `heads` proposal heads (all of them by default).
inline VideoForward propose_forward(const ModelParams& p, const FeatureMatrix& video, const RowVec& query_hidden,
                                    std::size_t heads = SIZE_MAX) {
  const auto& c = p.cfg;
  require(video.rows >= 1, ErrorKind::invalid_argument, "video needs at least one segment");
  require(video.cols == c.d_v, ErrorKind::dimension_mismatch, "video feature width != d_v");
  require(query_hidden.size() == c.h, ErrorKind::dimension_mismatch, "query hidden width != h");
  heads = std::min<std::size_t>(heads, c.m);
  const std::size_t T = video.rows;

  VideoForward f;
  f.V = video.to_double();
  f.U = f.V * p.W_v;
  f.U.rowwise() += p.b_v.row(0);
  f.u = query_hidden;
  f.vbar = f.U.colwise().mean();

  f.qa = normalize_checked(f.u * p.W_out + p.b_out, "query feature");
  MatrixXdR Z = f.U * p.W_out;
  Z.rowwise() += p.b_out.row(0);
  RowVec s(T);
  f.seg.resize(T);
  for (std::size_t t = 0; t < T; ++t) {
    f.seg[t] = normalize_checked(Z.row(t), "segment feature");
    s[t] = c.attn_scale * f.seg[t].v.dot(f.qa.v);
  }
  f.alpha = softmax(s);
  f.tau_bar = 0.0;
  for (std::size_t t = 0; t < T; ++t) f.tau_bar += f.alpha[t] * segment_time(t, T);
  f.ell = std::log(f.tau_bar) - std::log1p(-f.tau_bar);

  f.x.resize(2 * c.h);
  f.x << f.vbar, f.u;

  f.proposals.resize(heads);
  f.heads.resize(heads);
  for (std::size_t j = 0; j < heads; ++j) {
    auto& pr = f.proposals[j];
    auto& hc = f.heads[j];
    hc.center_logit = p.head_c_w.row(j).dot(f.x) + p.head_c_b(0, j) + p.head_pos(0, j) * f.ell;
    hc.width_logit = p.head_w_w.row(j).dot(f.x) + p.head_w_b(0, j);
    pr.center = sigmoid(hc.center_logit);
    pr.half_width = c.r_min + (c.r_max - c.r_min) * sigmoid(hc.width_logit);
    pr.pos_weights = gaussian_weights(pr.center, pr.half_width, T);
    hc.neg = negative_mask(pr.pos_weights);
    pr.neg_weights = hc.neg.h;
    hc.pos_pooled = pr.pos_weights * f.U;
    hc.neg_pooled = pr.neg_weights * f.U;
    hc.pos_out = normalize_checked(hc.pos_pooled * p.W_out + p.b_out, "positive proposal feature");
    hc.neg_out = normalize_checked(hc.neg_pooled * p.W_out + p.b_out, "negative proposal feature");
    pr.pos_feat = hc.pos_out.v;
    pr.neg_feat = hc.neg_out.v;
  }
  return f;
}

inline std::vector<Proposal> propose(const ModelParams& p, const FeatureMatrix& video, const RowVec& query_hidden) {
  return propose_forward(p, video, query_hidden).proposals;
}

inline Interval interval_of(const Proposal& pr, double duration) {
  require(duration > 0.0, ErrorKind::invalid_argument, "duration must be > 0");
  auto clamp01 = [](double x) { return std::clamp(x, 0.0, 1.0); };
  return {clamp01(pr.center - pr.half_width) * duration, clamp01(pr.center + pr.half_width) * duration};
}

// ---------------------------------------------------------------------------
// Reverse passes. Gradients accumulate into `grad` (same shapes as params).

// d_pos/d_neg: loss gradient w.r.t. each computed head's pos_feat/neg_feat
// (empty vectors mean zero). Returns the gradient w.r.t. the query hidden.
inline RowVec propose_backward(const ModelParams& p, const VideoForward& f, std::span<const RowVec> d_pos,
                               std::span<const RowVec> d_neg, ModelParams& grad) {
  const auto& c = p.cfg;
  const std::size_t T = f.num_segments();
  const std::size_t H = c.h;
  MatrixXdR dU = MatrixXdR::Zero(T, H);
  RowVec dx = RowVec::Zero(2 * H);
  double d_ell = 0.0;

  for (std::size_t j = 0; j < f.heads.size(); ++j) {
    const bool has_pos = j < d_pos.size() && d_pos[j].size() > 0;
    const bool has_neg = j < d_neg.size() && d_neg[j].size() > 0;
    if (!has_pos && !has_neg) continue;
    const auto& pr = f.proposals[j];
    const auto& hc = f.heads[j];

    RowVec dg = RowVec::Zero(T);
    if (has_pos) {
      RowVec dz = normalize_backward(hc.pos_out, d_pos[j]);
      grad.W_out.noalias() += hc.pos_pooled.transpose() * dz;
      grad.b_out += dz;
      RowVec dpool = dz * p.W_out.transpose();
      dg += dpool * f.U.transpose();
      dU.noalias() += pr.pos_weights.transpose() * dpool;
    }
    if (has_neg) {
      RowVec dz = normalize_backward(hc.neg_out, d_neg[j]);
      grad.W_out.noalias() += hc.neg_pooled.transpose() * dz;
      grad.b_out += dz;
      RowVec dpool = dz * p.W_out.transpose();
      RowVec dh = dpool * f.U.transpose();
      dU.noalias() += pr.neg_weights.transpose() * dpool;
      if (!hc.neg.uniform) {
        // h = (max g - g) / mass
        RowVec dht = (dh.array() - pr.neg_weights.dot(dh)).matrix() / hc.neg.mass;
        dg -= dht;
        dg[hc.neg.argmax] += dht.sum();
      }
    }

    // g = softmax(e), e_t = -(tau_t - c)^2 / (2 (r/3)^2)
    RowVec de = softmax_backward(pr.pos_weights, dg);
    const double r = pr.half_width;
    double dc = 0.0, dr = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
      const double z = segment_time(t, T) - pr.center;
      dc += de[t] * 9.0 * z / (r * r);
      dr += de[t] * 9.0 * z * z / (r * r * r);
    }
    const double dzc = dc * pr.center * (1.0 - pr.center);
    const double sw = sigmoid(hc.width_logit);
    const double dzr = dr * (c.r_max - c.r_min) * sw * (1.0 - sw);

    grad.head_c_w.row(j) += dzc * f.x;
    grad.head_c_b(0, j) += dzc;
    grad.head_pos(0, j) += dzc * f.ell;
    grad.head_w_w.row(j) += dzr * f.x;
    grad.head_w_b(0, j) += dzr;
    dx += dzc * p.head_c_w.row(j) + dzr * p.head_w_w.row(j);
    d_ell += dzc * p.head_pos(0, j);
  }

  RowVec du = dx.tail(H);
  const RowVec dvbar = dx.head(H);
  dU.rowwise() += dvbar / static_cast<double>(T);

  // ell = logit(tau_bar), tau_bar = sum alpha_t tau_t, alpha = softmax(kappa cos(z_t, q_a))
  if (d_ell != 0.0) {
    const double dtau = d_ell * (1.0 / f.tau_bar + 1.0 / (1.0 - f.tau_bar));
    RowVec dalpha(T);
    for (std::size_t t = 0; t < T; ++t) dalpha[t] = dtau * segment_time(t, T);
    const RowVec ds = softmax_backward(f.alpha, dalpha) * c.attn_scale;
    MatrixXdR dZ(T, c.d);
    RowVec dqa = RowVec::Zero(c.d);
    for (std::size_t t = 0; t < T; ++t) {
      dZ.row(t) = normalize_backward(f.seg[t], ds[t] * f.qa.v);
      dqa += ds[t] * f.seg[t].v;
    }
    grad.W_out.noalias() += f.U.transpose() * dZ;
    grad.b_out += dZ.colwise().sum();
    dU.noalias() += dZ * p.W_out.transpose();
    const RowVec dzq = normalize_backward(f.qa, dqa);
    grad.W_out.noalias() += f.u.transpose() * dzq;
    grad.b_out += dzq;
    du.noalias() += dzq * p.W_out.transpose();
  }

  grad.W_v.noalias() += f.V.transpose() * dU;
  grad.b_v += dU.colwise().sum();
  return du;
}

// dq: gradient w.r.t. q (may be empty); du_extra: gradient reaching the hidden
// state from the proposal heads (may be empty).
inline void encode_query_backward(const ModelParams& p, const QueryForward& f, const RowVec& dq,
                                  const RowVec& du_extra, ModelParams& grad) {
  RowVec du = RowVec::Zero(p.cfg.h);
  if (dq.size() > 0) {
    RowVec dz = normalize_backward(f.q, dq);
    grad.W_out.noalias() += f.u.transpose() * dz;
    grad.b_out += dz;
    du.noalias() += dz * p.W_out.transpose();
  }
  if (du_extra.size() > 0) du += du_extra;
  RowVec da = (du.array() * (1.0 - f.u.array().square())).matrix();
  grad.W_qw.noalias() += f.xbar.transpose() * da;
  grad.b_qw += da;
}

// ---------------------------------------------------------------------------

struct SampleForward {
  QueryForward query;
  VideoForward video;
};

inline SampleForward forward_sample(const ModelParams& p, const Sample& s, std::size_t heads = SIZE_MAX) {
  SampleForward f;
  f.query = encode_query(p, s.word_feats);
  f.video = propose_forward(p, s.video_feats, f.query.u, heads);
  return f;
}

struct FeatureBundle {
  SampleForward anchor;
  SampleForward sim;
  SampleForward dis;

  const RowVec& q() const { return anchor.query.q.v; }
  const RowVec& q_sim() const { return sim.query.q.v; }
  const RowVec& q_dis() const { return dis.query.q.v; }
  const std::vector<Proposal>& proposals() const { return anchor.video.proposals; }
  const RowVec& p_sim() const { return sim.video.proposals.front().pos_feat; }
  const RowVec& p_dis() const { return dis.video.proposals.front().pos_feat; }
};

inline FeatureBundle forward_bundle(const ModelParams& p, const Sample& anchor, const Sample& sim, const Sample& dis) {
  FeatureBundle b;
  try {
    b.anchor = forward_sample(p, anchor);
    b.sim = forward_sample(p, sim, 1);
    b.dis = forward_sample(p, dis, 1);
  } catch (const Error& e) {
    throw Error(e.kind(), "triple (" + std::to_string(anchor.id) + ", " + std::to_string(sim.id) + ", " +
                              std::to_string(dis.id) + "): " + e.what());
  }
  return b;
}

}  // namespace psm
