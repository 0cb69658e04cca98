#pragma once

// psm command line: synth, mine, train, eval, ablate, gradcheck, bench-mine.
//
// Configuration layers: built-in defaults < --config JSON file < flags.
// Every command prints its resolved configuration as one `config {...}` line
// before doing any work. Exit codes: 0 ok, 1 runtime error, 2 usage error.

#include <algorithm>
#include <chrono>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "psm/ablation.hpp"
#include "psm/corpus.hpp"
#include "psm/eval.hpp"
#include "psm/loss.hpp"
#include "psm/miner.hpp"
#include "psm/synth.hpp"
#include "psm/trainer.hpp"

namespace psm::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

// Flag values land in private storage and are copied onto the target only if
// the flag was given, after the config file has been applied.
class Overrides {
 public:
  template <class T>
  CLI::Option* add(CLI::App* app, const std::string& name, T& target, const std::string& desc) {
    auto v = std::make_shared<T>(target);
    CLI::Option* o = app->add_option(name, *v, desc);
    fns_.push_back([o, v, &target] {
      if (o->count() > 0) target = *v;
    });
    return o;
  }
  void apply() const {
    for (const auto& f : fns_) f();
  }

 private:
  std::vector<std::function<void()>> fns_;
};

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file: " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("config file " + path + ": " + e.what());
  }
}

// A config file is either the bare section or an object holding it under `key`.
inline std::optional<nlohmann::json> section(const nlohmann::json& j, const char* key, bool bare_ok) {
  if (!j.is_object()) throw UsageError("config file must hold a JSON object");
  if (j.contains(key)) return j.at(key);
  if (bare_ok && !j.contains("synth") && !j.contains("train")) return j;
  return std::nullopt;
}

template <class Fn>
void as_usage(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    throw UsageError(e.what());
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(e.what());
  }
}

inline void add_synth_flags(CLI::App* app, Overrides& ov, SynthConfig& c, bool with_seed) {
  ov.add(app, "--n-samples", c.n_samples, "training samples");
  ov.add(app, "--n-test", c.n_test, "test samples");
  ov.add(app, "--n-topics", c.n_topics, "planted topics");
  ov.add(app, "--segments", c.T, "segments per video (T)");
  ov.add(app, "--words", c.L, "words per query (L)");
  ov.add(app, "--d-v", c.d_v, "video feature dim");
  ov.add(app, "--d-w", c.d_w, "word feature dim");
  ov.add(app, "--d-e", c.d_e, "mining embedding dim");
  ov.add(app, "--sigma-v", c.sigma_v, "segment noise");
  ov.add(app, "--sigma-q", c.sigma_q, "query noise");
  ov.add(app, "--gt-min", c.gt_min, "min gt width (segments)");
  ov.add(app, "--gt-max", c.gt_max, "max gt width (segments)");
  ov.add(app, "--distractor-prob", c.distractor_prob, "chance of a second, off-topic event");
  ov.add(app, "--min-duration", c.min_duration, "min video duration (s)");
  ov.add(app, "--max-duration", c.max_duration, "max video duration (s)");
  if (with_seed) ov.add(app, "--seed", c.seed, "generator seed");
}

inline void add_train_flags(CLI::App* app, Overrides& ov, TrainConfig& c, bool with_seed) {
  ov.add(app, "--learning-rate", c.learning_rate, "Adam step size");
  ov.add(app, "--batch-size", c.batch_size, "anchors per step");
  ov.add(app, "--epochs", c.epochs, "epochs");
  if (with_seed) ov.add(app, "--seed", c.seed, "init/shuffle/pair seed");
  ov.add(app, "--hidden", c.h, "hidden width h");
  ov.add(app, "--dim", c.d, "joint feature dim d");
  ov.add(app, "--proposals", c.m, "proposal heads m");
  ov.add(app, "--r-min", c.r_min, "min proposal half width");
  ov.add(app, "--r-max", c.r_max, "max proposal half width");
  ov.add(app, "--attn-scale", c.attn_scale, "segment attention scale");
  ov.add(app, "--k", c.k, "similar samples per anchor");
  ov.add(app, "--g1", c.margins.g1, "margin of l_query");
  ov.add(app, "--g2", c.margins.g2, "margin of l_prop");
  ov.add(app, "--g3", c.margins.g3, "margin of l_query on the negative proposal");
  ov.add(app, "--g4", c.margins.g4, "margin of l_prop on the negative proposal");
  ov.add(app, "--g5", c.margins.g5, "margin of l_rank_query");
  ov.add(app, "--g6", c.margins.g6, "margin of l_rank_prop");
  ov.add(app, "--gamma-b", c.gamma_b, "base loss margin");
  ov.add(app, "--use-l-query", c.toggles.use_l_query, "true/false");
  ov.add(app, "--use-l-prop", c.toggles.use_l_prop, "true/false");
  ov.add(app, "--use-l-rank-query", c.toggles.use_l_rank_query, "true/false");
  ov.add(app, "--use-l-rank-prop", c.toggles.use_l_rank_prop, "true/false");
  ov.add(app, "--stop-gradient-branches", c.stop_gradient_branches, "detach similar/dissimilar branches");
}

inline ScreenKernel parse_kernel(const std::string& s) {
  if (s == "auto") return ScreenKernel::automatic;
  if (s == "sgemm") return ScreenKernel::sgemm;
  if (s == "amx") return ScreenKernel::amx_bf16;
  throw UsageError("unknown kernel '" + s + "'");
}

inline void echo(std::ostream& out, const nlohmann::ordered_json& j) { out << "config " << j.dump() << std::endl; }

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc | std::ios::binary);
  require(static_cast<bool>(f), ErrorKind::io, "cannot write " + path);
  f << text;
  require(static_cast<bool>(f), ErrorKind::io, "write failed: " + path);
}

inline EmbeddingMatrix random_unit_rows(std::uint32_t n, std::uint32_t d, std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, 0xBE4C));
  std::normal_distribution<float> nd(0.0f, 1.0f);
  std::vector<float> v(std::size_t(n) * d);
  for (std::uint32_t i = 0; i < n; ++i) {
    float* r = v.data() + std::size_t(i) * d;
    double s = 0.0;
    for (std::uint32_t c = 0; c < d; ++c) {
      r[c] = nd(rng);
      s += double(r[c]) * r[c];
    }
    const float inv = static_cast<float>(1.0 / std::sqrt(s));
    for (std::uint32_t c = 0; c < d; ++c) r[c] *= inv;
  }
  return EmbeddingMatrix(n, d, std::move(v));
}

}  // namespace detail

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using namespace detail;
  CLI::App app{"Positive sample mining for weakly supervised temporal grounding", "psm"};
  app.require_subcommand(1, 1);
  app.set_help_all_flag("--help-all", "help for every command");
  Overrides ov;
  std::string config_path;
  unsigned workers = default_workers();

  // synth
  SynthConfig sc;
  std::string out_dir;
  auto* c_synth = app.add_subcommand("synth", "generate a synthetic corpus");
  c_synth->add_option("--config", config_path, "JSON config (bare or under \"synth\")");
  c_synth->add_option("--out-dir", out_dir, "output directory")->required();
  add_synth_flags(c_synth, ov, sc, true);

  // mine
  std::string emb_path, manifest, out_path, kernel = "auto";
  std::uint32_t k = 20, d_e = 384;
  auto* c_mine = app.add_subcommand("mine", "build the top-k similar-sample index");
  auto* o_emb = c_mine->add_option("--embeddings", emb_path, "PSMF embedding matrix (n x d_e)");
  auto* o_man = c_mine->add_option("--manifest", manifest, "embed queries of this manifest with the reference embedder");
  o_emb->excludes(o_man);
  c_mine->add_option("--k", k, "neighbors per sample")->check(CLI::PositiveNumber);
  c_mine->add_option("--d-e", d_e, "reference embedder dim")->check(CLI::PositiveNumber);
  c_mine->add_option("--out", out_path, "PSMI output")->required();
  c_mine->add_option("--kernel", kernel, "auto | sgemm | amx");
  c_mine->add_option("--workers", workers, "worker threads")->check(CLI::PositiveNumber);

  // train
  TrainConfig tc;
  std::string index_path, log_path, resume_path, dtype = "f64";
  std::uint32_t checkpoint_every = 0;
  auto* c_train = app.add_subcommand("train", "train a model");
  c_train->add_option("--manifest", manifest, "training manifest")->required();
  c_train->add_option("--index", index_path, "PSMI index of the same corpus")->required();
  c_train->add_option("--config", config_path, "JSON config (bare or under \"train\")");
  c_train->add_option("--out", out_path, "checkpoint output")->required();
  c_train->add_option("--log", log_path, "per-step JSON lines log");
  c_train->add_option("--resume", resume_path, "continue from this checkpoint");
  c_train->add_option("--checkpoint-every", checkpoint_every, "also write --out every N epochs (0: end only)");
  c_train->add_option("--dtype", dtype, "checkpoint payload: f64 | f32")->check(CLI::IsMember({"f64", "f32"}));
  c_train->add_option("--workers", workers, "worker threads")->check(CLI::PositiveNumber);
  add_train_flags(c_train, ov, tc, true);

  // eval
  std::string ckpt_path, pred_path, baseline, report_path, table_path, write_pred;
  std::uint64_t baseline_seed = 0;
  auto* c_eval = app.add_subcommand("eval", "score ranked intervals against ground truth");
  c_eval->add_option("--manifest", manifest, "evaluation manifest")->required();
  auto* o_ck = c_eval->add_option("--checkpoint", ckpt_path, "model checkpoint");
  auto* o_pr = c_eval->add_option("--predictions", pred_path, "JSON lines {id, intervals}");
  auto* o_bl = c_eval->add_option("--baseline", baseline, "random | oracle")->check(CLI::IsMember({"random", "oracle"}));
  o_ck->excludes(o_pr)->excludes(o_bl);
  o_pr->excludes(o_bl);
  c_eval->add_option("--baseline-seed", baseline_seed, "seed of the random baseline");
  c_eval->add_option("--report", report_path, "JSON report output")->required();
  c_eval->add_option("--table", table_path, "TSV table output (default: <report>.tsv)");
  c_eval->add_option("--write-predictions", write_pred, "also write the ranked intervals");
  c_eval->add_option("--workers", workers, "worker threads")->check(CLI::PositiveNumber);

  // ablate
  AblationConfig ac;
  ac.train.epochs = 30;
  std::string rows = "default";
  std::vector<std::uint64_t> seeds;
  auto* c_abl = app.add_subcommand("ablate", "loss toggle grid on synthetic corpora");
  c_abl->add_option("--config", config_path, "JSON with \"synth\" and/or \"train\" sections");
  c_abl->add_option("--rows", rows, "default (10 rows) | all (16) | single (base, singles, full)")
      ->check(CLI::IsMember({"default", "all", "single"}));
  c_abl->add_option("--seeds", seeds, "seeds (default 0 1 2 3 4)");
  c_abl->add_option("--out", out_path, "TSV table output");
  c_abl->add_option("--report", report_path, "JSON with every cell");
  c_abl->add_option("--workers", workers, "worker threads")->check(CLI::PositiveNumber);
  add_synth_flags(c_abl, ov, ac.synth, false);
  add_train_flags(c_abl, ov, ac.train, false);

  // gradcheck
  GradcheckConfig gc;
  auto* c_gc = app.add_subcommand("gradcheck", "finite-difference check of the analytic gradient");
  ov.add(c_gc, "--trials", gc.trials, "random configurations")->check(CLI::PositiveNumber);
  ov.add(c_gc, "--seed", gc.seed, "suite seed");
  ov.add(c_gc, "--eps", gc.eps, "central difference step")->check(CLI::PositiveNumber);
  ov.add(c_gc, "--tol", gc.tolerance, "pass threshold on max relative error");
  ov.add(c_gc, "--hidden", gc.h, "h")->check(CLI::PositiveNumber);
  ov.add(c_gc, "--dim", gc.d, "d")->check(CLI::PositiveNumber);
  ov.add(c_gc, "--segments", gc.T, "T")->check(CLI::PositiveNumber);
  ov.add(c_gc, "--proposals", gc.m, "m")->check(CLI::PositiveNumber);
  c_gc->add_option("--workers", workers, "worker threads")->check(CLI::PositiveNumber);

  // bench-mine
  std::uint32_t rand_n = 0, rand_d = 384, repeats = 3;
  std::uint64_t rand_seed = 0;
  auto* c_bench = app.add_subcommand("bench-mine", "time build_index");
  auto* o_bemb = c_bench->add_option("--embeddings", emb_path, "PSMF embedding matrix");
  auto* o_rand = c_bench->add_option("--random", rand_n, "use this many random unit vectors instead");
  o_bemb->excludes(o_rand);
  c_bench->add_option("--random-dim", rand_d, "dim of the random vectors")->check(CLI::PositiveNumber);
  c_bench->add_option("--random-seed", rand_seed, "seed of the random vectors");
  c_bench->add_option("--k", k, "neighbors per sample")->check(CLI::PositiveNumber);
  c_bench->add_option("--repeats", repeats, "timed runs")->check(CLI::PositiveNumber);
  c_bench->add_option("--kernel", kernel, "auto | sgemm | amx");
  c_bench->add_option("--workers", workers, "worker threads")->check(CLI::PositiveNumber);

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (c_synth->parsed()) {
      as_usage([&] {
        if (!config_path.empty())
          if (auto s = section(read_json_file(config_path), "synth", true)) apply_json(sc, *s);
        ov.apply();
        validate(sc);
      });
      auto j = to_json(sc);
      j["out_dir"] = out_dir;
      echo(out, j);
      const auto data = generate(sc);
      write_synth(data, out_dir);
      out << "wrote " << data.train.size() << " train and " << data.test.size() << " test samples to " << out_dir
          << "\n";
      return kExitOk;
    }

    if (c_mine->parsed()) {
      const ScreenKernel kern = parse_kernel(kernel);
      if (emb_path.empty() == manifest.empty()) throw UsageError("mine needs exactly one of --embeddings, --manifest");
      nlohmann::ordered_json j;
      j["embeddings"] = emb_path.empty() ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(emb_path);
      j["manifest"] = manifest.empty() ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(manifest);
      j["d_e"] = d_e;
      j["k"] = k;
      j["kernel"] = kernel;
      j["out"] = out_path;
      j["workers"] = workers;
      echo(out, j);
      const EmbeddingMatrix e = emb_path.empty() ? embed_queries_reference(load_corpus(manifest), d_e)
                                                 : EmbeddingMatrix::from_features(read_feature_matrix(emb_path));
      const auto t0 = std::chrono::steady_clock::now();
      const auto idx = build_index(e, k, {workers, kern});
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      save_index(out_path, idx);
      out << "mined n=" << idx.n << " k=" << idx.k << " in " << secs << " s\n";
      return kExitOk;
    }

    if (c_train->parsed()) {
      as_usage([&] {
        if (!config_path.empty())
          if (auto s = section(read_json_file(config_path), "train", true)) apply_json(tc, *s);
        ov.apply();
        tc.workers = workers;
        validate(tc);
      });
      auto j = to_json(tc);
      j["manifest"] = manifest;
      j["index"] = index_path;
      j["out"] = out_path;
      j["resume"] = resume_path.empty() ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(resume_path);
      j["workers"] = workers;
      echo(out, j);

      const auto corpus = load_corpus(manifest);
      auto index = load_index(index_path);
      require(index.n == corpus.size(), ErrorKind::dimension_mismatch,
              "index has " + std::to_string(index.n) + " rows, corpus has " + std::to_string(corpus.size()));
      require(tc.k <= index.k, ErrorKind::out_of_range,
              "k=" + std::to_string(tc.k) + " exceeds the index's k=" + std::to_string(index.k));
      if (tc.k < index.k) index = index.truncated(tc.k);
      std::optional<Checkpoint> resume;
      if (!resume_path.empty()) resume = load_checkpoint(resume_path);
      const Dtype dt = dtype == "f32" ? Dtype::f32 : Dtype::f64;

      std::ofstream log;
      if (!log_path.empty()) {
        log.open(log_path, resume ? std::ios::app : std::ios::trunc);
        require(static_cast<bool>(log), ErrorKind::io, "cannot write log " + log_path);
      }
      TrainHooks hooks;
      double epoch_loss = 0.0;
      std::size_t epoch_steps = 0;
      hooks.on_step = [&](const StepStats& s) {
        epoch_loss += s.mean.total;
        ++epoch_steps;
        if (log.is_open()) log << to_json(s).dump() << '\n';
      };
      hooks.on_epoch = [&](const Checkpoint& ck) {
        if (checkpoint_every > 0 && ck.epochs_done % checkpoint_every == 0) save_checkpoint(out_path, ck, dt);
        out << "epoch " << ck.epochs_done << " mean loss " << epoch_loss / std::max<std::size_t>(epoch_steps, 1)
            << std::endl;
        epoch_loss = 0.0;
        epoch_steps = 0;
      };
      const auto ck = train(corpus, index, tc, resume, hooks);
      save_checkpoint(out_path, ck, dt);
      out << "saved " << out_path << " after " << ck.epochs_done << " epochs\n";
      return kExitOk;
    }

    if (c_eval->parsed()) {
      const int sources = !ckpt_path.empty() + !pred_path.empty() + !baseline.empty();
      if (sources != 1) throw UsageError("eval needs exactly one of --checkpoint, --predictions, --baseline");
      if (table_path.empty()) table_path = report_path + ".tsv";
      nlohmann::ordered_json j;
      j["manifest"] = manifest;
      j["checkpoint"] = ckpt_path.empty() ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(ckpt_path);
      j["predictions"] = pred_path.empty() ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(pred_path);
      j["baseline"] = baseline.empty() ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(baseline);
      j["baseline_seed"] = baseline_seed;
      j["report"] = report_path;
      j["table"] = table_path;
      j["workers"] = workers;
      echo(out, j);

      const auto corpus = load_corpus(manifest);
      EvalConfig ec;
      ec.workers = workers;
      std::unique_ptr<Predictor> pred;
      if (!ckpt_path.empty()) {
        auto ck = load_checkpoint(ckpt_path);
        require(ck.params.cfg.d_w == corpus.d_w && ck.params.cfg.d_v == corpus.d_v, ErrorKind::dimension_mismatch,
                "checkpoint feature dims differ from the corpus");
        LossConfig lc;
        if (!ck.config_json.empty()) {
          TrainConfig t;
          apply_json(t, nlohmann::json::parse(ck.config_json));
          lc = t.loss();
        }
        pred = std::make_unique<ModelPredictor>(std::move(ck.params), lc);
      } else if (!pred_path.empty()) {
        pred = std::make_unique<FilePredictor>(pred_path);
      } else if (baseline == "random") {
        pred = std::make_unique<RandomPredictor>(baseline_seed);
      } else {
        pred = std::make_unique<OraclePredictor>();
      }
      const auto ev = evaluate(corpus, *pred, ec);
      write_text(report_path, to_json(ev.report).dump(2) + "\n");
      write_text(table_path, to_tsv(ev.report));
      if (!write_pred.empty()) write_predictions(write_pred, corpus, ev.ranked);
      out << to_tsv(ev.report);
      return kExitOk;
    }

    if (c_abl->parsed()) {
      as_usage([&] {
        if (!config_path.empty()) {
          const auto f = read_json_file(config_path);
          if (auto s = section(f, "synth", false)) apply_json(ac.synth, *s);
          if (auto s = section(f, "train", false)) apply_json(ac.train, *s);
        }
        ov.apply();
        validate(ac.synth);
        validate(ac.train);
      });
      if (!seeds.empty()) ac.seeds = seeds;
      ac.rows = rows == "all" ? all_rows() : rows == "single" ? single_rows() : ten_rows();
      ac.workers = workers;
      nlohmann::ordered_json j;
      j["synth"] = to_json(ac.synth);
      j["synth"].erase("seed");
      j["train"] = to_json(ac.train);
      j["train"].erase("seed");
      j["train"].erase("toggles");
      j["seeds"] = ac.seeds;
      j["rows"] = rows;
      j["workers"] = workers;
      echo(out, j);

      const auto res = run_ablation(ac, [&](const AblationRow& r, const AblationCell& c) {
        out << "seed " << c.seed << " " << r.name << " R@1,mIoU " << c.report.miou.at(0) << std::endl;
      });
      const auto table = ablation_table(res);
      out << table;
      if (!out_path.empty()) write_text(out_path, table);
      if (!report_path.empty()) {
        nlohmann::ordered_json rep;
        rep["config"] = j;
        rep["rows"] = nlohmann::ordered_json::array();
        for (std::size_t r = 0; r < res.rows.size(); ++r) {
          nlohmann::ordered_json row;
          row["name"] = res.rows[r].name;
          TrainConfig t = ac.train;
          t.toggles = res.rows[r].toggles;
          row["train"] = to_json(t);
          row["train"].erase("seed");
          row["mean_r1_miou"] = res.mean_miou(r);
          row["mean_r1_iou_0.5"] = res.mean_recall1(r, 0.5);
          for (const auto& c : res.cells[r]) row["seeds"][std::to_string(c.seed)] = to_json(c.report);
          rep["rows"].push_back(row);
        }
        write_text(report_path, rep.dump(2) + "\n");
      }
      return kExitOk;
    }

    if (c_gc->parsed()) {
      ov.apply();
      nlohmann::ordered_json j;
      j["trials"] = gc.trials;
      j["seed"] = gc.seed;
      j["h"] = gc.h;
      j["d"] = gc.d;
      j["T"] = gc.T;
      j["m"] = gc.m;
      j["d_w"] = gc.d_w;
      j["d_v"] = gc.d_v;
      j["L"] = gc.L;
      j["eps"] = gc.eps;
      j["tolerance"] = gc.tolerance;
      j["kink_margin"] = gc.kink_margin;
      j["workers"] = workers;
      echo(out, j);
      const auto t0 = std::chrono::steady_clock::now();
      const auto r = run_gradcheck(gc, workers);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      out << "trials checked " << r.trials_checked << ", near a kink " << r.trials_near_kink << ", over tolerance "
          << r.trials_over_tolerance << "\n";
      out << "coordinates " << r.coordinates << ", excluded at kinks " << r.excluded_coordinates << "\n";
      out << "max relative error " << r.max_rel_error << " (trial " << r.worst_trial << ", " << r.worst_block
          << ") in " << secs << " s\n";
      if (!r.pass(gc.tolerance)) {
        err << "gradcheck: max relative error " << r.max_rel_error << " >= " << gc.tolerance << "\n";
        return kExitRuntime;
      }
      return kExitOk;
    }

    if (c_bench->parsed()) {
      const ScreenKernel kern = parse_kernel(kernel);
      if (emb_path.empty() == (rand_n == 0)) throw UsageError("bench-mine needs exactly one of --embeddings, --random");
      nlohmann::ordered_json j;
      j["embeddings"] = emb_path.empty() ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(emb_path);
      j["random"] = rand_n;
      j["random_dim"] = rand_d;
      j["random_seed"] = rand_seed;
      j["k"] = k;
      j["repeats"] = repeats;
      j["kernel"] = kernel;
      j["workers"] = workers;
      echo(out, j);
      const EmbeddingMatrix e = emb_path.empty() ? random_unit_rows(rand_n, rand_d, rand_seed)
                                                 : EmbeddingMatrix::from_features(read_feature_matrix(emb_path));
      std::vector<double> times;
      for (std::uint32_t r = 0; r < repeats; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto idx = build_index(e, k, {workers, kern});
        times.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
        out << "run " << r << " n=" << idx.n << " k=" << idx.k << " " << times.back() << " s" << std::endl;
      }
      std::sort(times.begin(), times.end());
      out << "min " << times.front() << " s, median " << times[times.size() / 2] << " s\n";
      return kExitOk;
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    err << "error (" << to_string(e.kind()) << "): " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

inline int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args);
}

}  // namespace psm::cli
