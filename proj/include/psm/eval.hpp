#pragma once

// Interval measures, proposal ranking at inference and the grounding /
// grounded-QA metric report.
//
// Predictions file: JSON lines, {"id": 3, "intervals": [[s, e], ...]}, one
// ranked list per sample id (best first).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "psm/common.hpp"
#include "psm/corpus.hpp"
#include "psm/loss.hpp"
#include "psm/miner.hpp"
#include "psm/model.hpp"

namespace psm {

inline double tiou(const Interval& a, const Interval& b) {
  const double inter = std::max(0.0, std::min(a.end, b.end) - std::max(a.start, b.start));
  const double uni = std::max(a.end, b.end) - std::min(a.start, b.start);
  return uni > 0.0 ? inter / uni : 0.0;
}

inline double iop(const Interval& pred, const Interval& gt) {
  const double len = pred.end - pred.start;
  if (len <= 0.0) return 0.0;
  const double inter = std::max(0.0, std::min(pred.end, gt.end) - std::max(pred.start, gt.start));
  return inter / len;
}

enum class Measure { tiou, iop };

inline double measure(Measure m, const Interval& pred, const Interval& gt) {
  return m == Measure::tiou ? tiou(pred, gt) : iop(pred, gt);
}

// Proposals ranked by ascending base loss; ties keep head order.
inline std::vector<Interval> vote_select(const std::vector<Interval>& intervals, const std::vector<double>& base_losses) {
  require(!intervals.empty() && intervals.size() == base_losses.size(), ErrorKind::invalid_argument,
          "vote_select needs one score per proposal");
  std::vector<Interval> out;
  out.reserve(intervals.size());
  for (auto i : rank_by_score(base_losses)) out.push_back(intervals[i]);
  return out;
}

using Ranked = std::vector<std::vector<Interval>>;

namespace detail {

inline void check_inputs(const Ranked& ranked, const std::vector<Interval>& gts) {
  require(ranked.size() == gts.size(), ErrorKind::dimension_mismatch, "one prediction list per ground truth");
  require(!ranked.empty(), ErrorKind::invalid_argument, "no samples to score");
  for (const auto& r : ranked) require(!r.empty(), ErrorKind::invalid_argument, "sample without predictions");
}

inline double best_of(const std::vector<Interval>& preds, const Interval& gt, std::size_t n, Measure m) {
  double best = 0.0;
  for (std::size_t i = 0; i < std::min(n, preds.size()); ++i) best = std::max(best, measure(m, preds[i], gt));
  return best;
}

}  // namespace detail

inline double recall_at(const Ranked& ranked, const std::vector<Interval>& gts, std::size_t n, double threshold,
                        Measure m = Measure::tiou) {
  detail::check_inputs(ranked, gts);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < ranked.size(); ++i)
    if (detail::best_of(ranked[i], gts[i], n, m) >= threshold) ++hits;
  return static_cast<double>(hits) / static_cast<double>(ranked.size());
}

inline double mean_best(const Ranked& ranked, const std::vector<Interval>& gts, std::size_t n,
                        Measure m = Measure::tiou) {
  detail::check_inputs(ranked, gts);
  double sum = 0.0;
  for (std::size_t i = 0; i < ranked.size(); ++i) sum += detail::best_of(ranked[i], gts[i], n, m);
  return sum / static_cast<double>(ranked.size());
}

inline double mean_best_iou(const Ranked& ranked, const std::vector<Interval>& gts, std::size_t n) {
  return mean_best(ranked, gts, n, Measure::tiou);
}

inline double acc_qa(const std::vector<bool>& answer_correct) {
  require(!answer_correct.empty(), ErrorKind::invalid_argument, "no answer flags");
  return static_cast<double>(std::count(answer_correct.begin(), answer_correct.end(), true)) /
         static_cast<double>(answer_correct.size());
}

inline double acc_gqa(const Ranked& ranked, const std::vector<Interval>& gts, const std::vector<bool>& answer_correct) {
  detail::check_inputs(ranked, gts);
  require(answer_correct.size() == ranked.size(), ErrorKind::invalid_argument, "answer flag missing for some samples");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < ranked.size(); ++i)
    if (answer_correct[i] && iop(ranked[i].front(), gts[i]) >= 0.5) ++hits;
  return static_cast<double>(hits) / static_cast<double>(ranked.size());
}

// ---------------------------------------------------------------------------

struct EvalConfig {
  std::vector<std::size_t> ns{1, 5};
  std::vector<double> iou_thresholds{0.1, 0.3, 0.5, 0.7};
  std::vector<double> iop_thresholds{0.3, 0.5};
  unsigned workers = 1;
};

struct MetricReport {
  std::size_t count = 0;
  std::vector<std::size_t> ns;
  std::vector<double> iou_thresholds;
  std::vector<double> iop_thresholds;
  std::vector<std::vector<double>> recall;  // [n][iou threshold]
  std::vector<double> miou;                 // per n
  std::vector<double> miop;                 // per n
  std::vector<double> iop_recall;           // top-1, per iop threshold
  std::optional<double> acc_qa;
  std::optional<double> acc_gqa;

  bool operator==(const MetricReport&) const = default;
};

inline MetricReport compute_report(const Ranked& ranked, const std::vector<Interval>& gts,
                                   const std::vector<std::optional<bool>>& flags, const EvalConfig& cfg = {}) {
  detail::check_inputs(ranked, gts);
  MetricReport r;
  r.count = ranked.size();
  r.ns = cfg.ns;
  r.iou_thresholds = cfg.iou_thresholds;
  r.iop_thresholds = cfg.iop_thresholds;
  for (auto n : cfg.ns) {
    std::vector<double> row;
    for (double t : cfg.iou_thresholds) row.push_back(recall_at(ranked, gts, n, t, Measure::tiou));
    r.recall.push_back(std::move(row));
    r.miou.push_back(mean_best(ranked, gts, n, Measure::tiou));
    r.miop.push_back(mean_best(ranked, gts, n, Measure::iop));
  }
  for (double t : cfg.iop_thresholds) r.iop_recall.push_back(recall_at(ranked, gts, 1, t, Measure::iop));
  if (!flags.empty() && std::all_of(flags.begin(), flags.end(), [](auto& f) { return f.has_value(); })) {
    std::vector<bool> ok;
    for (auto& f : flags) ok.push_back(*f);
    r.acc_qa = acc_qa(ok);
    r.acc_gqa = acc_gqa(ranked, gts, ok);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Predictors

class Predictor {
 public:
  virtual ~Predictor() = default;
  // Ranked intervals (seconds), best first.
  virtual std::vector<Interval> predict(const Sample& s) const = 0;
  virtual std::string name() const = 0;
};

// Forward pass of the anchor only, ranked by the base loss.
class ModelPredictor final : public Predictor {
 public:
  ModelPredictor(ModelParams params, LossConfig loss = {}) : params_(std::move(params)), loss_(std::move(loss)) {}

  std::vector<Interval> predict(const Sample& s) const override {
    const auto f = forward_sample(params_, s);
    std::optional<SurrogateBaseLoss> fb;
    const auto scores = proposal_base_losses(f.video.proposals, f.query.q.v, resolve_base(loss_, fb));
    std::vector<Interval> iv;
    for (const auto& pr : f.video.proposals) iv.push_back(interval_of(pr, s.duration));
    return vote_select(iv, scores);
  }
  std::string name() const override { return "model"; }

 private:
  ModelParams params_;
  LossConfig loss_;
};

// m uniformly random intervals per sample, seeded by (seed, sample id).
class RandomPredictor final : public Predictor {
 public:
  explicit RandomPredictor(std::uint64_t seed, std::size_t m = 5) : seed_(seed), m_(m) {}

  std::vector<Interval> predict(const Sample& s) const override {
    std::mt19937_64 rng(derive_seed(seed_, 0x4A4D, s.id));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<Interval> out;
    for (std::size_t i = 0; i < m_; ++i) {
      double a = u(rng) * s.duration, b = u(rng) * s.duration;
      out.push_back({std::min(a, b), std::max(a, b)});
    }
    return out;
  }
  std::string name() const override { return "random"; }

 private:
  std::uint64_t seed_;
  std::size_t m_;
};

class OraclePredictor final : public Predictor {
 public:
  std::vector<Interval> predict(const Sample& s) const override {
    require(s.gt.has_value(), ErrorKind::invalid_argument, "oracle needs a ground-truth interval");
    return {*s.gt};
  }
  std::string name() const override { return "oracle"; }
};

inline std::map<std::uint32_t, std::vector<Interval>> read_predictions(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::io, "cannot open predictions: " + path);
  std::map<std::uint32_t, std::vector<Interval>> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = nlohmann::json::parse(line);
      std::vector<Interval> iv;
      for (const auto& p : j.at("intervals")) {
        require(p.is_array() && p.size() == 2, ErrorKind::invalid_argument, "interval must be [start, end]");
        Interval x{p[0].get<double>(), p[1].get<double>()};
        require(std::isfinite(x.start) && std::isfinite(x.end) && 0.0 <= x.start && x.start <= x.end,
                ErrorKind::invalid_argument, "interval must satisfy 0 <= start <= end");
        iv.push_back(x);
      }
      const auto id = j.at("id").get<std::uint32_t>();
      require(!out.count(id), ErrorKind::invalid_argument, "duplicate id " + std::to_string(id));
      out[id] = std::move(iv);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::invalid_argument, path + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const Error& e) {
      throw Error(e.kind(), path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

inline void write_predictions(const std::string& path, const Corpus& corpus, const Ranked& ranked) {
  std::ofstream out(path, std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::io, "cannot write predictions: " + path);
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    nlohmann::ordered_json j;
    j["id"] = corpus[i].id;
    j["intervals"] = nlohmann::json::array();
    for (const auto& x : ranked[i]) j["intervals"].push_back({x.start, x.end});
    out << j.dump() << '\n';
  }
  require(static_cast<bool>(out), ErrorKind::io, "predictions write failed: " + path);
}

class FilePredictor final : public Predictor {
 public:
  explicit FilePredictor(const std::string& path) : preds_(read_predictions(path)) {}

  std::vector<Interval> predict(const Sample& s) const override {
    auto it = preds_.find(s.id);
    require(it != preds_.end() && !it->second.empty(), ErrorKind::invalid_argument,
            "no predictions for sample " + std::to_string(s.id));
    return it->second;
  }
  std::string name() const override { return "file"; }

 private:
  std::map<std::uint32_t, std::vector<Interval>> preds_;
};

inline Ranked predict_all(const Corpus& corpus, const Predictor& pred, unsigned workers = 1) {
  Ranked ranked(corpus.size());
  parallel_for(corpus.size(), workers, [&](std::size_t i) { ranked[i] = pred.predict(corpus[i]); });
  return ranked;
}

struct Evaluation {
  Ranked ranked;
  MetricReport report;
};

inline Evaluation evaluate(const Corpus& corpus, const Predictor& pred, const EvalConfig& cfg = {}) {
  std::vector<Interval> gts;
  std::vector<std::optional<bool>> flags;
  for (const auto& s : corpus.samples) {
    require(s.gt.has_value(), ErrorKind::invalid_argument,
            "sample " + std::to_string(s.id) + " has no ground-truth interval");
    gts.push_back(*s.gt);
    flags.push_back(s.answer_correct);
  }
  Evaluation e;
  e.ranked = predict_all(corpus, pred, cfg.workers);
  e.report = compute_report(e.ranked, gts, flags, cfg);
  return e;
}

inline Evaluation evaluate(const Corpus& corpus, const ModelParams& params, const EvalConfig& cfg = {},
                           const LossConfig& loss = {}) {
  return evaluate(corpus, ModelPredictor(params, loss), cfg);
}

// ---------------------------------------------------------------------------
// Neighbourhood cohesion of learned proposal features. For each anchor, the
// mean cosine between its selected positive feature and those of its mined
// neighbours is compared with the mean over as many random non-neighbours.

struct CohesionReport {
  std::size_t anchors = 0;
  std::size_t cohesive = 0;  // neighbour mean > random mean
  double mean_neighbor = 0.0;
  double mean_random = 0.0;

  double fraction() const { return anchors == 0 ? 0.0 : static_cast<double>(cohesive) / anchors; }
};

inline std::vector<RowVec> selected_features(const Corpus& corpus, const ModelParams& params,
                                             const LossConfig& loss = {}, unsigned workers = 1) {
  std::vector<RowVec> out(corpus.size());
  parallel_for(corpus.size(), workers, [&](std::size_t i) {
    const auto f = forward_sample(params, corpus[i]);
    std::optional<SurrogateBaseLoss> fb;
    const auto scores = proposal_base_losses(f.video.proposals, f.query.q.v, resolve_base(loss, fb));
    out[i] = f.video.proposals[rank_by_score(scores).front()].pos_feat;
  });
  return out;
}

inline CohesionReport neighbor_cohesion(const std::vector<RowVec>& feats, const MiningIndex& index,
                                        std::uint64_t seed) {
  const std::size_t n = feats.size();
  require(index.n == n, ErrorKind::dimension_mismatch, "mining index and features differ in size");
  require(n >= 2 * std::size_t(index.k) + 1, ErrorKind::invalid_argument, "too few samples for k random non-neighbours");
  CohesionReport r;
  r.anchors = n;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<char> excluded(n, 0);
    excluded[i] = 1;
    double nb = 0.0;
    for (auto j : index.row(i)) {
      excluded[j] = 1;
      nb += feats[i].dot(feats[j]);
    }
    nb /= index.k;
    std::vector<std::uint32_t> pool;
    for (std::uint32_t j = 0; j < n; ++j)
      if (!excluded[j]) pool.push_back(j);
    std::mt19937_64 rng(derive_seed(seed, 0xC0E5, i));
    double rnd = 0.0;
    for (std::uint32_t c = 0; c < index.k; ++c) {
      std::uniform_int_distribution<std::size_t> pick(c, pool.size() - 1);
      std::swap(pool[c], pool[pick(rng)]);
      rnd += feats[i].dot(feats[pool[c]]);
    }
    rnd /= index.k;
    if (nb > rnd) ++r.cohesive;
    r.mean_neighbor += nb / n;
    r.mean_random += rnd / n;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Report output

inline std::string fmt_threshold(double t) {
  std::ostringstream os;
  os << t;
  return os.str();
}

inline nlohmann::ordered_json to_json(const MetricReport& r) {
  nlohmann::ordered_json j;
  j["count"] = r.count;
  nlohmann::ordered_json rec;
  for (std::size_t a = 0; a < r.ns.size(); ++a)
    for (std::size_t b = 0; b < r.iou_thresholds.size(); ++b)
      rec["R@" + std::to_string(r.ns[a]) + ",IoU=" + fmt_threshold(r.iou_thresholds[b])] = r.recall[a][b];
  j["recall"] = rec;
  nlohmann::ordered_json mi, mp;
  for (std::size_t a = 0; a < r.ns.size(); ++a) {
    mi["R@" + std::to_string(r.ns[a])] = r.miou[a];
    mp["R@" + std::to_string(r.ns[a])] = r.miop[a];
  }
  j["mIoU"] = mi;
  j["mIoP"] = mp;
  nlohmann::ordered_json ir;
  for (std::size_t b = 0; b < r.iop_thresholds.size(); ++b)
    ir["R@1,IoP=" + fmt_threshold(r.iop_thresholds[b])] = r.iop_recall[b];
  j["iop_recall"] = ir;
  j["acc_qa"] = r.acc_qa ? nlohmann::ordered_json(*r.acc_qa) : nlohmann::ordered_json(nullptr);
  j["acc_gqa"] = r.acc_gqa ? nlohmann::ordered_json(*r.acc_gqa) : nlohmann::ordered_json(nullptr);
  return j;
}

// Two-column table: metric name, value (fixed 6 decimals).
inline std::string to_tsv(const MetricReport& r) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(6);
  os << "metric\tvalue\n";
  os << "count\t" << r.count << '\n';
  for (std::size_t a = 0; a < r.ns.size(); ++a)
    for (std::size_t b = 0; b < r.iou_thresholds.size(); ++b)
      os << "R@" << r.ns[a] << ",IoU=" << fmt_threshold(r.iou_thresholds[b]) << '\t' << r.recall[a][b] << '\n';
  for (std::size_t a = 0; a < r.ns.size(); ++a) os << "R@" << r.ns[a] << ",mIoU\t" << r.miou[a] << '\n';
  for (std::size_t a = 0; a < r.ns.size(); ++a) os << "R@" << r.ns[a] << ",mIoP\t" << r.miop[a] << '\n';
  for (std::size_t b = 0; b < r.iop_thresholds.size(); ++b)
    os << "R@1,IoP=" << fmt_threshold(r.iop_thresholds[b]) << '\t' << r.iop_recall[b] << '\n';
  if (r.acc_qa) os << "Acc@QA\t" << *r.acc_qa << '\n';
  if (r.acc_gqa) os << "Acc@GQA\t" << *r.acc_gqa << '\n';
  return os.str();
}

}  // namespace psm
