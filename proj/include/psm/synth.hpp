#pragma once

// Seeded synthetic corpora with planted topics.
//
// Every topic z owns three unit prototypes: words (d_w), video (d_v) and
// mining embedding (d_e). A sample of topic z gets
//   word rows      w_z + sigma_q * xi / sqrt(d_w)
//   embedding      normalize(e_z + sigma_q * xi / sqrt(d_e))
//   segment t      sigma_v * xi / sqrt(d_v)  (+ v_z inside the gt interval)
// with xi standard normal, so sigma_* is the expected noise-to-signal norm
// ratio. Optionally a distractor event of another topic is planted in a
// disjoint stretch of the same video.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "psm/common.hpp"
#include "psm/corpus.hpp"
#include "psm/miner.hpp"

#include <json.hpp>

namespace psm {

struct SynthConfig {
  std::uint32_t n_samples = 400;  // train split
  std::uint32_t n_test = 200;
  std::uint32_t n_topics = 4;
  std::uint32_t T = 24;
  std::uint32_t L = 8;
  std::uint32_t d_v = 32;
  std::uint32_t d_w = 32;
  std::uint32_t d_e = 64;
  double sigma_v = 1.0;
  double sigma_q = 0.5;
  std::uint32_t gt_min = 3;  // segments
  std::uint32_t gt_max = 8;
  double distractor_prob = 0.0;
  double min_duration = 20.0;
  double max_duration = 60.0;
  std::uint64_t seed = 0;
};

inline void validate(const SynthConfig& c) {
  require(c.n_topics >= 2, ErrorKind::invalid_argument, "n_topics must be >= 2");
  require(c.n_samples >= c.n_topics, ErrorKind::invalid_argument, "n_samples must be >= n_topics");
  require(c.sigma_v >= 0.0 && c.sigma_q >= 0.0, ErrorKind::invalid_argument, "noise levels must be >= 0");
  require(c.L >= 1 && c.d_v >= 1 && c.d_w >= 1 && c.d_e >= 1, ErrorKind::invalid_argument,
          "dimensions must be >= 1");
  require(c.gt_min >= 2 && c.gt_min <= c.gt_max && c.gt_max <= c.T, ErrorKind::invalid_argument,
          "need 2 <= gt_min <= gt_max <= T");
  require(c.distractor_prob >= 0.0 && c.distractor_prob <= 1.0, ErrorKind::invalid_argument,
          "distractor_prob must be in [0, 1]");
  require(c.distractor_prob == 0.0 || 2 * c.gt_max <= c.T, ErrorKind::invalid_argument,
          "distractors need T >= 2 * gt_max");
  require(0.0 < c.min_duration && c.min_duration <= c.max_duration, ErrorKind::invalid_argument,
          "need 0 < min_duration <= max_duration");
}

inline nlohmann::ordered_json to_json(const SynthConfig& c) {
  nlohmann::ordered_json j;
  j["n_samples"] = c.n_samples;
  j["n_test"] = c.n_test;
  j["n_topics"] = c.n_topics;
  j["T"] = c.T;
  j["L"] = c.L;
  j["d_v"] = c.d_v;
  j["d_w"] = c.d_w;
  j["d_e"] = c.d_e;
  j["sigma_v"] = c.sigma_v;
  j["sigma_q"] = c.sigma_q;
  j["gt_min"] = c.gt_min;
  j["gt_max"] = c.gt_max;
  j["distractor_prob"] = c.distractor_prob;
  j["min_duration"] = c.min_duration;
  j["max_duration"] = c.max_duration;
  j["seed"] = c.seed;
  return j;
}

inline void apply_json(SynthConfig& c, const nlohmann::json& j) {
  require(j.is_object(), ErrorKind::invalid_argument, "synth config must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& k = it.key();
    const auto& v = it.value();
    if (k == "n_samples") c.n_samples = v.get<std::uint32_t>();
    else if (k == "n_test") c.n_test = v.get<std::uint32_t>();
    else if (k == "n_topics") c.n_topics = v.get<std::uint32_t>();
    else if (k == "T") c.T = v.get<std::uint32_t>();
    else if (k == "L") c.L = v.get<std::uint32_t>();
    else if (k == "d_v") c.d_v = v.get<std::uint32_t>();
    else if (k == "d_w") c.d_w = v.get<std::uint32_t>();
    else if (k == "d_e") c.d_e = v.get<std::uint32_t>();
    else if (k == "sigma_v") c.sigma_v = v.get<double>();
    else if (k == "sigma_q") c.sigma_q = v.get<double>();
    else if (k == "gt_min") c.gt_min = v.get<std::uint32_t>();
    else if (k == "gt_max") c.gt_max = v.get<std::uint32_t>();
    else if (k == "distractor_prob") c.distractor_prob = v.get<double>();
    else if (k == "min_duration") c.min_duration = v.get<double>();
    else if (k == "max_duration") c.max_duration = v.get<double>();
    else if (k == "seed") c.seed = v.get<std::uint64_t>();
    else throw Error(ErrorKind::invalid_argument, "unknown synth config key '" + k + "'");
  }
}

struct SynthData {
  Corpus train;
  Corpus test;
  EmbeddingMatrix train_embeddings;
  EmbeddingMatrix test_embeddings;
  std::vector<std::uint32_t> train_topics;
  std::vector<std::uint32_t> test_topics;
};

namespace detail {

inline std::vector<double> unit_vector(std::mt19937_64& rng, std::uint32_t d) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(d);
  double s = 0.0;
  for (auto& x : v) {
    x = n(rng);
    s += x * x;
  }
  s = std::sqrt(s);
  for (auto& x : v) x /= s;
  return v;
}

struct Prototypes {
  std::vector<std::vector<double>> w, v, e;
};

inline Prototypes make_prototypes(const SynthConfig& c) {
  std::mt19937_64 rng(derive_seed(c.seed, 0x9807));
  Prototypes p;
  for (std::uint32_t z = 0; z < c.n_topics; ++z) {
    p.w.push_back(unit_vector(rng, c.d_w));
    p.v.push_back(unit_vector(rng, c.d_v));
    p.e.push_back(unit_vector(rng, c.d_e));
  }
  return p;
}

inline std::string topic_query(std::mt19937_64& rng, std::uint32_t z, std::uint32_t L) {
  static const char* kFiller[] = {"person", "the", "a", "then", "slowly"};
  std::uniform_int_distribution<int> word(0, 5);
  std::uniform_int_distribution<int> filler(0, 4);
  std::bernoulli_distribution use_filler(0.25);
  std::string q;
  for (std::uint32_t i = 0; i < L; ++i) {
    if (!q.empty()) q += ' ';
    if (use_filler(rng))
      q += kFiller[filler(rng)];
    else
      q += "t" + std::to_string(z) + "w" + std::to_string(word(rng));
  }
  return q;
}

inline void add_noise(std::mt19937_64& rng, std::span<float> row, const std::vector<double>* proto, double sigma) {
  std::normal_distribution<double> n(0.0, 1.0);
  const double s = sigma / std::sqrt(static_cast<double>(row.size()));
  for (std::size_t i = 0; i < row.size(); ++i) row[i] = static_cast<float>((proto ? (*proto)[i] : 0.0) + s * n(rng));
}

inline void generate_split(const SynthConfig& c, const Prototypes& P, std::uint32_t n, std::uint64_t split_salt,
                           const std::string& name, Corpus& out, EmbeddingMatrix& emb, std::vector<std::uint32_t>& topics) {
  out = Corpus{};
  out.d_w = c.d_w;
  out.d_v = c.d_v;
  out.split_name = name;
  topics.assign(n, 0);
  std::vector<float> e_data(std::size_t(n) * c.d_e);
  for (std::uint32_t i = 0; i < n; ++i) {
    std::mt19937_64 rng(derive_seed(c.seed, split_salt, i));
    // balanced topics, order scrambled by the sample stream
    std::uniform_int_distribution<std::uint32_t> topic(0, c.n_topics - 1);
    const std::uint32_t z = i < c.n_topics ? i : topic(rng);
    topics[i] = z;

    Sample s;
    s.id = i;
    s.query_text = topic_query(rng, z, c.L);
    s.word_feats = FeatureMatrix(c.L, c.d_w);
    for (std::uint32_t r = 0; r < c.L; ++r) add_noise(rng, s.word_feats.row(r), &P.w[z], c.sigma_q);

    std::vector<double> e(c.d_e);
    {
      std::normal_distribution<double> nd(0.0, 1.0);
      const double sc = c.sigma_q / std::sqrt(static_cast<double>(c.d_e));
      double norm = 0.0;
      for (std::uint32_t k = 0; k < c.d_e; ++k) {
        e[k] = P.e[z][k] + sc * nd(rng);
        norm += e[k] * e[k];
      }
      norm = std::sqrt(norm);
      for (std::uint32_t k = 0; k < c.d_e; ++k) e_data[std::size_t(i) * c.d_e + k] = static_cast<float>(e[k] / norm);
    }

    std::uniform_real_distribution<double> dur(c.min_duration, c.max_duration);
    s.duration = dur(rng);
    std::uniform_int_distribution<std::uint32_t> width(c.gt_min, c.gt_max);
    const std::uint32_t w = width(rng);
    std::uint32_t start = 0, d_start = 0, d_w = 0, dz = z;
    bool distract = false;
    if (c.distractor_prob > 0.0 && std::bernoulli_distribution(c.distractor_prob)(rng)) {
      distract = true;
      d_w = width(rng);
      // place two disjoint events: order, then free gaps
      const std::uint32_t slack = c.T - w - d_w;
      std::uniform_int_distribution<std::uint32_t> g(0, slack);
      std::uint32_t a = g(rng), b = g(rng);
      if (a > b) std::swap(a, b);
      const bool target_first = std::bernoulli_distribution(0.5)(rng);
      if (target_first) {
        start = a;
        d_start = b + w;
      } else {
        d_start = a;
        start = b + d_w;
      }
      std::uniform_int_distribution<std::uint32_t> other(0, c.n_topics - 2);
      dz = other(rng);
      if (dz >= z) ++dz;
    } else {
      std::uniform_int_distribution<std::uint32_t> st(0, c.T - w);
      start = st(rng);
    }
    s.video_feats = FeatureMatrix(c.T, c.d_v);
    for (std::uint32_t t = 0; t < c.T; ++t) {
      const std::vector<double>* proto = nullptr;
      if (t >= start && t < start + w)
        proto = &P.v[z];
      else if (distract && t >= d_start && t < d_start + d_w)
        proto = &P.v[dz];
      add_noise(rng, s.video_feats.row(t), proto, c.sigma_v);
    }
    // duration * T / T can round past duration
    const double end = start + w == c.T ? s.duration : s.duration * (start + w) / c.T;
    s.gt = Interval{s.duration * start / c.T, end};
    const double p_ok = 0.4 + 0.5 * z / (c.n_topics - 1);
    s.answer_correct = std::bernoulli_distribution(p_ok)(rng);
    out.samples.push_back(std::move(s));
  }
  emb = EmbeddingMatrix(n, c.d_e, std::move(e_data));
}

}  // namespace detail

inline SynthData generate(const SynthConfig& c) {
  validate(c);
  const auto P = detail::make_prototypes(c);
  SynthData d;
  detail::generate_split(c, P, c.n_samples, 0x7A1, "train", d.train, d.train_embeddings, d.train_topics);
  if (c.n_test > 0) detail::generate_split(c, P, c.n_test, 0x7E57, "test", d.test, d.test_embeddings, d.test_topics);
  return d;
}

// Writes <dir>/{train,test}.jsonl, feature files and <split>_embeddings.psmf.
inline void write_synth(const SynthData& d, const std::string& dir) {
  std::filesystem::create_directories(dir);
  save_corpus(d.train, dir, "train");
  write_feature_matrix((std::filesystem::path(dir) / "train_embeddings.psmf").string(),
                       d.train_embeddings.to_features());
  if (!d.test.samples.empty()) {
    save_corpus(d.test, dir, "test");
    write_feature_matrix((std::filesystem::path(dir) / "test_embeddings.psmf").string(),
                         d.test_embeddings.to_features());
  }
}

}  // namespace psm
