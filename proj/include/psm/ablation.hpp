#pragma once

// Loss-toggle grid on synthetic corpora. For each seed s: generate(synth with
// seed s), mine the train split, then train + evaluate one model per row with
// train.seed = s. Rows therefore share corpora, indices and initialization.

#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "psm/eval.hpp"
#include "psm/synth.hpp"
#include "psm/trainer.hpp"

namespace psm {

struct AblationRow {
  std::string name;
  LossToggles toggles;
};

inline std::string toggle_name(const LossToggles& t) {
  std::string s;
  auto add = [&](bool on, const char* n) {
    if (!on) return;
    if (!s.empty()) s += '+';
    s += n;
  };
  add(t.use_l_query, "query");
  add(t.use_l_prop, "prop");
  add(t.use_l_rank_query, "rank_query");
  add(t.use_l_rank_prop, "rank_prop");
  return s.empty() ? "base" : s;
}

inline AblationRow make_row(bool q, bool p, bool rq, bool rp) {
  LossToggles t{q, p, rq, rp};
  return {toggle_name(t), t};
}

// Base, the four singles, four pairs, full.
inline std::vector<AblationRow> ten_rows() {
  return {make_row(0, 0, 0, 0), make_row(1, 0, 0, 0), make_row(0, 1, 0, 0), make_row(0, 0, 1, 0),
          make_row(0, 0, 0, 1), make_row(1, 1, 0, 0), make_row(0, 0, 1, 1), make_row(1, 0, 1, 0),
          make_row(0, 1, 0, 1), make_row(1, 1, 1, 1)};
}

// base, the four single toggles, full
inline std::vector<AblationRow> single_rows() {
  return {make_row(0, 0, 0, 0), make_row(1, 0, 0, 0), make_row(0, 1, 0, 0),
          make_row(0, 0, 1, 0), make_row(0, 0, 0, 1), make_row(1, 1, 1, 1)};
}

inline std::vector<AblationRow> all_rows() {
  std::vector<AblationRow> out;
  for (unsigned b = 0; b < 16; ++b) out.push_back(make_row(b & 1, b & 2, b & 4, b & 8));
  return out;
}

struct AblationConfig {
  SynthConfig synth;
  TrainConfig train;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::vector<AblationRow> rows = ten_rows();
  unsigned workers = 1;
};

struct AblationCell {
  std::uint64_t seed = 0;
  MetricReport report;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  std::vector<std::vector<AblationCell>> cells;  // [row][seed]

  // Mean over seeds of R@1 mIoU, in percent.
  double mean_miou(std::size_t row) const {
    double s = 0.0;
    for (const auto& c : cells[row]) s += c.report.miou.at(0);
    return cells[row].empty() ? 0.0 : 100.0 * s / static_cast<double>(cells[row].size());
  }
  // Mean over seeds of R@1 at IoU threshold `thr` (must be in the report), in percent.
  double mean_recall1(std::size_t row, double thr) const {
    double s = 0.0;
    for (const auto& c : cells[row]) {
      const auto& th = c.report.iou_thresholds;
      std::size_t b = 0;
      while (b < th.size() && th[b] != thr) ++b;
      require(b < th.size(), ErrorKind::invalid_argument, "threshold not in report");
      s += c.report.recall.at(0)[b];
    }
    return cells[row].empty() ? 0.0 : 100.0 * s / static_cast<double>(cells[row].size());
  }
  std::size_t find(const std::string& name) const {
    for (std::size_t r = 0; r < rows.size(); ++r)
      if (rows[r].name == name) return r;
    throw Error(ErrorKind::invalid_argument, "no ablation row '" + name + "'");
  }
};

using AblationProgress = std::function<void(const AblationRow&, const AblationCell&)>;

inline AblationResult run_ablation(const AblationConfig& cfg, const AblationProgress& progress = {}) {
  require(!cfg.rows.empty() && !cfg.seeds.empty(), ErrorKind::invalid_argument, "ablation needs rows and seeds");
  require(cfg.synth.n_test >= 1, ErrorKind::invalid_argument, "ablation needs a test split");
  AblationResult res;
  res.rows = cfg.rows;
  res.cells.assign(cfg.rows.size(), {});
  for (auto seed : cfg.seeds) {
    SynthConfig sc = cfg.synth;
    sc.seed = seed;
    const auto data = generate(sc);
    BuildOptions bo;
    bo.workers = cfg.workers;
    const auto index = build_index(data.train_embeddings, cfg.train.k, bo);
    EvalConfig ec;
    ec.workers = cfg.workers;
    for (std::size_t r = 0; r < cfg.rows.size(); ++r) {
      TrainConfig tc = cfg.train;
      tc.seed = seed;
      tc.toggles = cfg.rows[r].toggles;
      tc.workers = cfg.workers;
      const auto ck = train(data.train, index, tc);
      AblationCell cell{seed, evaluate(data.test, ck.params, ec, tc.loss()).report};
      if (progress) progress(cfg.rows[r], cell);
      res.cells[r].push_back(std::move(cell));
    }
  }
  return res;
}

// One line per row: name, toggles, R@1 IoU=0.5 and R@1 mIoU (seed means, percent).
inline std::string ablation_table(const AblationResult& res) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(2);
  os << "row\tquery\tprop\trank_query\trank_prop\tR@1,IoU=0.5\tR@1,mIoU\n";
  for (std::size_t r = 0; r < res.rows.size(); ++r) {
    const auto& t = res.rows[r].toggles;
    os << res.rows[r].name << '\t' << t.use_l_query << '\t' << t.use_l_prop << '\t' << t.use_l_rank_query << '\t'
       << t.use_l_rank_prop << '\t' << res.mean_recall1(r, 0.5) << '\t' << res.mean_miou(r) << '\n';
  }
  return os.str();
}

}  // namespace psm
