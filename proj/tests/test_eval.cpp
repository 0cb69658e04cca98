#include <gtest/gtest.h>

#include <random>

#include "test_util.hpp"

using namespace psm;

namespace {

// Hand-placed fixture shared with tests/oracles/misc_oracle.py.
const std::vector<Interval> kGts = {{2, 8},  {0, 10},  {5, 15}, {10, 20}, {0, 4},  {3, 9},   {12, 18},
                                    {1, 2},  {6, 30},  {0, 50}, {20, 25}, {7, 11}, {4, 16},  {9, 10},
                                    {0, 30}, {15, 45}, {2, 3},  {8, 24},  {30, 40}, {11, 13}};
const Ranked kPreds = {
    {{2, 8}, {0, 1}},    {{5, 15}, {0, 10}},          {{0, 10}, {6, 14}},  {{30, 40}, {12, 18}, {10, 20}},
    {{0, 2}, {1, 3}},    {{3, 6}, {0, 12}},           {{12, 18}},          {{0, 4}, {1.5, 2}},
    {{6, 12}, {10, 40}}, {{0, 25}, {25, 50}, {0, 50}}, {{21, 24}, {19, 26}}, {{0, 5}, {8, 10}},
    {{4, 10}, {10, 16}}, {{9.5, 10.5}, {8, 9}},       {{10, 20}, {0, 60}}, {{15, 30}, {30, 45}, {20, 40}},
    {{2.5, 3}, {2, 2}},  {{8, 16}, {16, 24}},         {{35, 36}, {28, 42}}, {{11, 12}, {12, 14}}};
const std::vector<bool> kFlags10 = {true, true, false, true, true, false, true, true, true, false};

Ranked random_ranked(std::mt19937_64& rng, std::size_t n, std::vector<Interval>& gts) {
  std::uniform_real_distribution<double> u(0, 100);
  std::uniform_int_distribution<int> len(1, 6);
  Ranked r(n);
  gts.clear();
  for (std::size_t i = 0; i < n; ++i) {
    double a = u(rng), b = u(rng);
    gts.push_back({std::min(a, b), std::max(a, b)});
    const int m = len(rng);
    for (int j = 0; j < m; ++j) {
      a = u(rng);
      b = u(rng);
      r[i].push_back({std::min(a, b), std::max(a, b)});
    }
  }
  return r;
}

SynthConfig eval_synth() {
  SynthConfig s;
  s.n_samples = 40;
  s.n_test = 30;
  s.T = 10;
  s.L = 3;
  s.d_v = 6;
  s.d_w = 6;
  s.d_e = 8;
  s.gt_min = 2;
  s.gt_max = 4;
  s.seed = 9;
  return s;
}

}  // namespace

// --- measures ---------------------------------------------------------------------

TEST(Measures, TiouExamples) {
  EXPECT_EQ(tiou({2, 8}, {2, 8}), 1.0);
  EXPECT_NEAR(tiou({0, 10}, {5, 15}), 1.0 / 3.0, 1e-15);
  EXPECT_EQ(tiou({0, 1}, {2, 3}), 0.0);
  EXPECT_EQ(tiou({3, 3}, {3, 3}), 0.0);
}

TEST(Measures, IopExamples) {
  EXPECT_EQ(iop({3, 4}, {2, 8}), 1.0);
  EXPECT_EQ(iop({0, 10}, {5, 15}), 0.5);
  EXPECT_EQ(iop({0, 1}, {2, 3}), 0.0);
  EXPECT_EQ(iop({2, 2}, {0, 5}), 0.0);
}

TEST(Measures, Properties) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 10);
  for (int i = 0; i < 2000; ++i) {
    double a = u(rng), b = u(rng), c = u(rng), d = u(rng);
    const Interval x{std::min(a, b), std::max(a, b)}, y{std::min(c, d), std::max(c, d)};
    const double t = tiou(x, y);
    EXPECT_GE(t, 0.0);
    EXPECT_LE(t, 1.0);
    EXPECT_EQ(t, tiou(y, x));
    const double p = iop(x, y);
    EXPECT_GE(p, 0.0);
    EXPECT_LE(p, 1.0);
    EXPECT_LE(t, p + 1e-15);
    if (x.end > x.start) {
      const Interval inner{x.start + 0.25 * (x.end - x.start), x.start + 0.5 * (x.end - x.start)};
      if (inner.end > inner.start) {
        EXPECT_EQ(iop(inner, x), 1.0);
      }
    }
  }
}

// --- vote selection ---------------------------------------------------------------

TEST(VoteSelect, Examples) {
  const std::vector<Interval> iv = {{0, 1}, {1, 2}, {2, 3}};
  auto r = vote_select(iv, {0.3, 0.1, 0.2});
  ASSERT_EQ(r.size(), 3u);
  EXPECT_EQ(r[0].start, 1.0);
  EXPECT_EQ(r[1].start, 2.0);
  EXPECT_EQ(r[2].start, 0.0);
  r = vote_select(iv, {0.5, 0.5, 0.5});
  EXPECT_EQ(r[0].start, 0.0);
  EXPECT_EQ(r[2].start, 2.0);
  EXPECT_EQ(vote_select({{4, 5}}, {9.0}).front().start, 4.0);
  EXPECT_EQ(rank_by_score({0.3, 0.1, 0.2}), (std::vector<std::uint32_t>{1, 2, 0}));
  EXPECT_THROW(vote_select(iv, {0.1}), Error);
}

// --- recall and means --------------------------------------------------------------

TEST(Recall, Examples) {
  const std::vector<Interval> g = {{2, 8}, {0, 10}};
  EXPECT_EQ(recall_at({{{2, 8}}, {{0, 10}}}, g, 1, 0.7), 1.0);
  EXPECT_EQ(recall_at({{{2, 8}}, {{20, 30}}}, g, 1, 0.5), 0.5);
  EXPECT_EQ(mean_best_iou({{{2, 8}}, {{0, 10}}}, g, 1), 1.0);
  EXPECT_NEAR(mean_best_iou({{{5, 15}}}, {{0, 10}}, 1), 1.0 / 3.0, 1e-15);
}

TEST(Recall, InputChecks) {
  EXPECT_THROW(recall_at({{{0, 1}}}, {{0, 1}, {1, 2}}, 1, 0.5), Error);
  EXPECT_THROW(recall_at({}, {}, 1, 0.5), Error);
  EXPECT_THROW(recall_at({{}}, {{0, 1}}, 1, 0.5), Error);
}

TEST(Recall, TwentySampleFixture) {
  EvalConfig cfg;
  const auto r = compute_report(kPreds, kGts, {}, cfg);
  const double r1[] = {0.9, 0.75, 0.55, 0.1};
  const double r5[] = {1.0, 1.0, 0.95, 0.4};
  for (int b = 0; b < 4; ++b) {
    EXPECT_NEAR(r.recall[0][b], r1[b], 1e-12) << b;
    EXPECT_NEAR(r.recall[1][b], r5[b], 1e-12) << b;
  }
  EXPECT_NEAR(r.miou[0], 0.42666666666666658, 1e-12);
  EXPECT_NEAR(r.miou[1], 0.6658403361344537, 1e-12);
  EXPECT_NEAR(r.miop[0], 0.7875, 1e-12);
  EXPECT_NEAR(r.miop[1], 0.975, 1e-12);
  EXPECT_NEAR(r.iop_recall[0], 0.85, 1e-12);
  EXPECT_NEAR(r.iop_recall[1], 0.85, 1e-12);
  EXPECT_FALSE(r.acc_qa.has_value());
}

TEST(GroundedQa, Examples) {
  EXPECT_EQ(acc_qa({true, true}), 1.0);
  EXPECT_EQ(acc_gqa({{{3, 4}}, {{0, 1}}}, {{2, 8}, {0, 10}}, {true, true}), 1.0);
  EXPECT_EQ(acc_gqa({{{0, 10}}, {{20, 30}}}, {{8, 9}, {0, 10}}, {true, true}), 0.0);
  EXPECT_THROW(acc_qa({}), Error);
  EXPECT_THROW(acc_gqa({{{0, 1}}}, {{0, 1}}, {}), Error);
}

TEST(GroundedQa, TenSampleFixture) {
  const Ranked p(kPreds.begin(), kPreds.begin() + 10);
  const std::vector<Interval> g(kGts.begin(), kGts.begin() + 10);
  EXPECT_NEAR(acc_qa(kFlags10), 0.7, 1e-12);
  EXPECT_NEAR(acc_gqa(p, g, kFlags10), 0.5, 1e-12);
  std::vector<std::optional<bool>> flags(kFlags10.begin(), kFlags10.end());
  const auto r = compute_report(p, g, flags);
  EXPECT_NEAR(*r.acc_qa, 0.7, 1e-12);
  EXPECT_NEAR(*r.acc_gqa, 0.5, 1e-12);
}

TEST(Recall, MonotoneOverRandomSets) {
  std::mt19937_64 rng(77);
  std::bernoulli_distribution coin(0.6);
  const std::vector<double> th = {0.1, 0.3, 0.5, 0.7};
  for (int set = 0; set < 1000; ++set) {
    std::vector<Interval> g;
    const auto r = random_ranked(rng, 12, g);
    for (std::size_t n = 1; n <= 5; ++n)
      for (std::size_t b = 0; b < th.size(); ++b) {
        const double x = recall_at(r, g, n, th[b]);
        EXPECT_LE(x, recall_at(r, g, n + 1, th[b]));
        if (b + 1 < th.size()) {
          EXPECT_GE(x, recall_at(r, g, n, th[b + 1]));
        }
      }
    std::vector<bool> flags;
    for (int i = 0; i < 12; ++i) flags.push_back(coin(rng));
    const double gqa = acc_gqa(r, g, flags);
    EXPECT_LE(gqa, acc_qa(flags));
    EXPECT_LE(gqa, recall_at(r, g, 1, 0.5, Measure::iop));
  }
}

// --- end to end -------------------------------------------------------------------

TEST(Evaluate, OracleScoresPerfect) {
  const auto data = generate(eval_synth());
  const auto e = evaluate(data.test, OraclePredictor());
  for (const auto& row : e.report.recall)
    for (double v : row) EXPECT_EQ(v, 1.0);
  for (double v : e.report.miou) EXPECT_EQ(v, 1.0);
  ASSERT_TRUE(e.report.acc_gqa.has_value());
  EXPECT_EQ(*e.report.acc_gqa, *e.report.acc_qa);
}

TEST(Evaluate, RandomBaselineOrdering) {
  const auto data = generate(eval_synth());
  const auto r = evaluate(data.test, RandomPredictor(3)).report;
  EXPECT_GT(r.recall[1][0], 0.0);
  EXPECT_LT(r.recall[0][3], 0.5);
  for (std::size_t b = 0; b < r.iou_thresholds.size(); ++b) EXPECT_GE(r.recall[1][b], r.recall[0][b]);
}

TEST(Evaluate, ModelPathIsDeterministicAndInferenceOnly) {
  const auto data = generate(eval_synth());
  TrainConfig tc;
  tc.h = 6;
  tc.d = 6;
  tc.m = 3;
  const auto params = init_params(tc.model(data.test.d_w, data.test.d_v), 5);
  instrumentation().reset();
  const auto a = evaluate(data.test, params);
  EXPECT_EQ(instrumentation().topk_calls.load(), 0u);
  EXPECT_EQ(instrumentation().pair_draws.load(), 0u);
  EXPECT_EQ(instrumentation().psm_loss_calls.load(), 0u);
  EvalConfig par;
  par.workers = 3;
  const auto b = evaluate(data.test, params, par);
  EXPECT_EQ(to_json(a.report).dump(), to_json(b.report).dump());
  EXPECT_EQ(to_tsv(a.report), to_tsv(b.report));
  for (const auto& row : a.ranked) EXPECT_EQ(row.size(), 3u);
}

TEST(Evaluate, MissingGroundTruth) {
  auto data = generate(eval_synth());
  data.test.samples[4].gt.reset();
  try {
    evaluate(data.test, RandomPredictor(1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("sample 4"), std::string::npos) << e.what();
  }
}

TEST(Evaluate, ReportFormats) {
  const auto r = compute_report(kPreds, kGts, {});
  const auto j = to_json(r);
  EXPECT_EQ(j["count"], 20);
  EXPECT_DOUBLE_EQ(j["recall"]["R@1,IoU=0.5"].get<double>(), 0.55);
  EXPECT_DOUBLE_EQ(j["mIoP"]["R@5"].get<double>(), 0.975);
  EXPECT_TRUE(j["acc_qa"].is_null());
  const auto t = to_tsv(r);
  EXPECT_NE(t.find("R@1,IoU=0.7\t0.100000\n"), std::string::npos) << t;
  EXPECT_NE(t.find("R@1,IoP=0.3\t0.850000\n"), std::string::npos);
  EXPECT_EQ(t.find("Acc@QA"), std::string::npos);
}

// --- prediction files --------------------------------------------------------------

TEST(Predictions, RoundTrip) {
  test::TempDir dir("pred");
  const auto data = generate(eval_synth());
  const auto e = evaluate(data.test, RandomPredictor(4));
  write_predictions(dir / "p.jsonl", data.test, e.ranked);
  const auto back = evaluate(data.test, FilePredictor(dir / "p.jsonl"));
  EXPECT_EQ(back.report, e.report);
}

TEST(Predictions, BadFiles) {
  test::TempDir dir("predbad");
  auto write = [&](const std::string& name, const std::string& text) {
    std::ofstream(dir / name) << text;
    return dir / name;
  };
  EXPECT_THROW(read_predictions(write("a", "{\"id\": 1}\n")), Error);
  EXPECT_THROW(read_predictions(write("b", "{\"id\": 1, \"intervals\": [[3, 2]]}\n")), Error);
  EXPECT_THROW(read_predictions(write("c", "{\"id\": 1, \"intervals\": []}\n{\"id\": 1, \"intervals\": []}\n")),
               Error);
  EXPECT_THROW(read_predictions(write("d", "not json\n")), Error);
  EXPECT_THROW(read_predictions(dir / "missing"), Error);
  const auto ok = read_predictions(write("e", "\n{\"id\": 7, \"intervals\": [[1, 2], [0, 4.5]]}\n"));
  ASSERT_EQ(ok.at(7).size(), 2u);
  EXPECT_EQ(ok.at(7)[1].end, 4.5);
  const auto data = generate(eval_synth());
  EXPECT_THROW(evaluate(data.test, FilePredictor(dir / "e")), Error);
}

// --- cohesion ------------------------------------------------------------------------

TEST(Cohesion, TwoClusters) {
  // points 0..4 near +x, 5..9 near +y; neighbours are the cluster mates
  std::vector<RowVec> feats;
  std::vector<float> flat;
  for (int i = 0; i < 10; ++i) {
    const double s = 0.01 * i;
    RowVec v = i < 5 ? test::rvec({1, s}) : test::rvec({s, 1});
    feats.push_back(v.normalized());
    flat.push_back(static_cast<float>(feats.back()[0]));
    flat.push_back(static_cast<float>(feats.back()[1]));
  }
  const EmbeddingMatrix e(10, 2, flat);
  const auto idx = build_index(e, 3);
  const auto r = neighbor_cohesion(feats, idx, 1);
  EXPECT_EQ(r.anchors, 10u);
  EXPECT_EQ(r.cohesive, 10u);
  EXPECT_EQ(r.fraction(), 1.0);
  EXPECT_GT(r.mean_neighbor, r.mean_random);

  // identical features: no anchor can be strictly cohesive
  std::vector<RowVec> same(10, test::rvec({1, 0}));
  EXPECT_EQ(neighbor_cohesion(same, idx, 1).cohesive, 0u);
  EXPECT_THROW(neighbor_cohesion(std::vector<RowVec>(feats.begin(), feats.begin() + 6), idx, 1), Error);
  EXPECT_THROW(neighbor_cohesion(feats, build_index(e, 5), 1), Error);
}
