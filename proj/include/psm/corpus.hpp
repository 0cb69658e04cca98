#pragma once

// Sample/corpus data model, the PSMF feature-matrix file format and the
// JSON-lines manifest.
//
// PSMF layout (all integers u32, little-endian):
//   "PSMF" | version=1 | rows | cols | rows*cols float32 payload (row-major)
//
// Manifest: one JSON object per line, e.g.
//   {"id":0,"query":"person opens door","word_feats":"f/0_w.psmf",
//    "video_feats":"f/0_v.psmf","duration":30.5,"gt":[3.0,9.5],"answer_correct":true}
// "gt" and "answer_correct" are optional. Relative paths resolve against the
// manifest's directory.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "psm/common.hpp"

namespace psm {

using MatrixXdR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct FeatureMatrix {
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::vector<float> data;  // row-major

  FeatureMatrix() = default;
  FeatureMatrix(std::uint32_t r, std::uint32_t c) : rows(r), cols(c), data(std::size_t(r) * c, 0.0f) {}

  float& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  float operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<const float> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
  std::span<float> row(std::size_t r) { return {data.data() + r * cols, cols}; }

  MatrixXdR to_double() const {
    MatrixXdR m(rows, cols);
    for (std::size_t i = 0; i < data.size(); ++i) m.data()[i] = data[i];
    return m;
  }

  bool operator==(const FeatureMatrix&) const = default;
};

inline void validate(const FeatureMatrix& m) {
  require(m.data.size() == std::size_t(m.rows) * m.cols, ErrorKind::dimension_mismatch,
          "feature matrix payload length != rows*cols");
  for (float v : m.data) require(std::isfinite(v), ErrorKind::non_finite, "feature matrix contains NaN/Inf");
}

inline constexpr std::uint32_t kFeatureFormatVersion = 1;

inline void write_feature_matrix(const std::string& path, const FeatureMatrix& m) {
  validate(m);
  bin::Writer w(path);
  w.magic("PSMF");
  w.put<std::uint32_t>(kFeatureFormatVersion);
  w.put<std::uint32_t>(m.rows);
  w.put<std::uint32_t>(m.cols);
  w.array<float>(m.data);
  w.close();
}

inline FeatureMatrix read_feature_matrix(const std::string& path) {
  bin::Reader r(path);
  r.expect_magic("PSMF");
  auto version = r.get<std::uint32_t>();
  require(version == kFeatureFormatVersion, ErrorKind::bad_magic,
          "unsupported PSMF version " + std::to_string(version) + " in " + path);
  FeatureMatrix m;
  m.rows = r.get<std::uint32_t>();
  m.cols = r.get<std::uint32_t>();
  const std::size_t n = std::size_t(m.rows) * m.cols;
  require(r.remaining() >= n * sizeof(float), ErrorKind::truncated, "PSMF payload truncated: " + path);
  require(r.remaining() == n * sizeof(float), ErrorKind::truncated, "PSMF trailing bytes: " + path);
  m.data.resize(n);
  for (auto& v : m.data) v = r.get<float>();
  validate(m);
  return m;
}

// ---------------------------------------------------------------------------

struct Interval {
  double start = 0.0;
  double end = 0.0;

  double length() const { return end - start; }
  bool operator==(const Interval&) const = default;
};

struct Sample {
  std::uint32_t id = 0;
  std::string query_text;
  FeatureMatrix word_feats;   // L x d_w
  FeatureMatrix video_feats;  // T x d_v
  double duration = 0.0;
  std::optional<Interval> gt;
  std::optional<bool> answer_correct;

  std::uint32_t num_words() const { return word_feats.rows; }
  std::uint32_t num_segments() const { return video_feats.rows; }
  bool operator==(const Sample&) const = default;
};

struct Corpus {
  std::vector<Sample> samples;
  std::uint32_t d_w = 0;
  std::uint32_t d_v = 0;
  std::string split_name;

  std::size_t size() const { return samples.size(); }
  const Sample& operator[](std::size_t i) const { return samples[i]; }
};

struct CorpusLimits {
  std::uint32_t max_query_len = 20;
  std::uint32_t max_segments = 200;
};

inline void validate_sample(const Sample& s, const CorpusLimits& lim) {
  const std::string tag = "sample " + std::to_string(s.id) + ": ";
  validate(s.word_feats);
  validate(s.video_feats);
  require(s.num_words() >= 1 && s.num_words() <= lim.max_query_len, ErrorKind::invalid_argument,
          tag + "query length " + std::to_string(s.num_words()) + " outside [1, " +
              std::to_string(lim.max_query_len) + "]");
  require(s.num_segments() >= 1 && s.num_segments() <= lim.max_segments, ErrorKind::invalid_argument,
          tag + "segment count " + std::to_string(s.num_segments()) + " outside [1, " +
              std::to_string(lim.max_segments) + "]");
  require(std::isfinite(s.duration) && s.duration > 0.0, ErrorKind::invalid_argument, tag + "duration must be > 0");
  if (s.gt) {
    require(0.0 <= s.gt->start && s.gt->start <= s.gt->end && s.gt->end <= s.duration, ErrorKind::invalid_argument,
            tag + "ground-truth interval must satisfy 0 <= start <= end <= duration");
  }
}

inline void validate_corpus(const Corpus& c, const CorpusLimits& lim = {}) {
  for (std::size_t i = 0; i < c.samples.size(); ++i) {
    const auto& s = c.samples[i];
    require(s.id == i, ErrorKind::invalid_argument, "sample ids must be dense 0..N-1");
    validate_sample(s, lim);
    require(s.word_feats.cols == c.d_w, ErrorKind::dimension_mismatch,
            "sample " + std::to_string(i) + ": d_w " + std::to_string(s.word_feats.cols) + " != " +
                std::to_string(c.d_w));
    require(s.video_feats.cols == c.d_v, ErrorKind::dimension_mismatch,
            "sample " + std::to_string(i) + ": d_v " + std::to_string(s.video_feats.cols) + " != " +
                std::to_string(c.d_v));
  }
}

inline Corpus load_corpus(const std::string& manifest_path, const CorpusLimits& lim = {}) {
  namespace fs = std::filesystem;
  std::ifstream in(manifest_path);
  require(static_cast<bool>(in), ErrorKind::io, "cannot open manifest: " + manifest_path);
  const fs::path base = fs::path(manifest_path).parent_path();
  auto resolve = [&](const std::string& p) {
    fs::path fp(p);
    return (fp.is_absolute() ? fp : base / fp).string();
  };

  Corpus c;
  c.split_name = fs::path(manifest_path).stem().string();
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::invalid_argument, manifest_path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    Sample s;
    s.id = static_cast<std::uint32_t>(c.samples.size());
    try {
      s.query_text = rec.at("query").get<std::string>();
      s.word_feats = read_feature_matrix(resolve(rec.at("word_feats").get<std::string>()));
      s.video_feats = read_feature_matrix(resolve(rec.at("video_feats").get<std::string>()));
      s.duration = rec.at("duration").get<double>();
      if (rec.contains("gt") && !rec["gt"].is_null()) {
        const auto& g = rec["gt"];
        require(g.is_array() && g.size() == 2, ErrorKind::invalid_argument, "gt must be [start, end]");
        s.gt = Interval{g[0].get<double>(), g[1].get<double>()};
      }
      if (rec.contains("answer_correct") && !rec["answer_correct"].is_null())
        s.answer_correct = rec["answer_correct"].get<bool>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::invalid_argument, manifest_path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    if (c.samples.empty()) {
      c.d_w = s.word_feats.cols;
      c.d_v = s.video_feats.cols;
    }
    c.samples.push_back(std::move(s));
  }
  validate_corpus(c, lim);
  return c;
}

// Writes one PSMF pair per sample under <dir>/<feature_subdir>/ and a manifest
// at <dir>/<name>.jsonl. Returns the manifest path.
inline std::string save_corpus(const Corpus& c, const std::string& dir, const std::string& name) {
  namespace fs = std::filesystem;
  validate_corpus(c);
  const fs::path root(dir);
  const fs::path feat_dir = root / (name + "_feats");
  fs::create_directories(feat_dir);
  const fs::path manifest = root / (name + ".jsonl");
  std::ofstream out(manifest, std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::io, "cannot write manifest: " + manifest.string());
  for (const auto& s : c.samples) {
    const std::string wrel = name + "_feats/" + std::to_string(s.id) + "_w.psmf";
    const std::string vrel = name + "_feats/" + std::to_string(s.id) + "_v.psmf";
    write_feature_matrix((root / wrel).string(), s.word_feats);
    write_feature_matrix((root / vrel).string(), s.video_feats);
    nlohmann::ordered_json rec;
    rec["id"] = s.id;
    rec["query"] = s.query_text;
    rec["word_feats"] = wrel;
    rec["video_feats"] = vrel;
    rec["duration"] = s.duration;
    if (s.gt) rec["gt"] = {s.gt->start, s.gt->end};
    if (s.answer_correct) rec["answer_correct"] = *s.answer_correct;
    out << rec.dump() << '\n';
  }
  require(static_cast<bool>(out), ErrorKind::io, "manifest write failed: " + manifest.string());
  return manifest.string();
}

}  // namespace psm
