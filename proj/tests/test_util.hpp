#pragma once

#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <iterator>
#include <random>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "psm/psm.hpp"

namespace psm::test {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("psm_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string operator/(const std::string& name) const { return (path_ / name).string(); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline FeatureMatrix matrix(std::uint32_t rows, std::uint32_t cols, std::initializer_list<float> vals) {
  FeatureMatrix m(rows, cols);
  m.data.assign(vals.begin(), vals.end());
  return m;
}

inline MatrixXdR dmat(Eigen::Index rows, Eigen::Index cols, std::initializer_list<double> vals) {
  MatrixXdR m(rows, cols);
  std::copy(vals.begin(), vals.end(), m.data());
  return m;
}

inline RowVec rvec(std::initializer_list<double> vals) {
  RowVec v(static_cast<Eigen::Index>(vals.size()));
  std::copy(vals.begin(), vals.end(), v.data());
  return v;
}

inline RowVec unit(std::initializer_list<double> vals) { return rvec(vals).normalized(); }

inline Sample sample(std::uint32_t id, FeatureMatrix words, FeatureMatrix video, double duration = 10.0) {
  Sample s;
  s.id = id;
  s.query_text = "q" + std::to_string(id);
  s.word_feats = std::move(words);
  s.video_feats = std::move(video);
  s.duration = duration;
  return s;
}

inline Sample random_sample(std::mt19937_64& rng, std::uint32_t id, std::uint32_t L, std::uint32_t T,
                            std::uint32_t d_w, std::uint32_t d_v) {
  std::normal_distribution<float> n(0.0f, 1.0f);
  Sample s = sample(id, FeatureMatrix(L, d_w), FeatureMatrix(T, d_v));
  for (auto& v : s.word_feats.data) v = n(rng);
  for (auto& v : s.video_feats.data) v = n(rng);
  return s;
}

// Hand-set parameters shared with tests/oracles/forward_oracle.py.
inline ModelParams tiny_params() {
  ModelConfig c;
  c.d_w = 3;
  c.d_v = 2;
  c.h = 2;
  c.d = 2;
  c.m = 2;
  ModelParams p = ModelParams::zeros(c);
  p.W_qw = dmat(3, 2, {0.5, -0.3, 0.2, 0.8, -0.6, 0.1});
  p.b_qw = dmat(1, 2, {0.1, -0.2});
  p.W_v = dmat(2, 2, {0.7, -0.4, 0.3, 0.9});
  p.b_v = dmat(1, 2, {0.05, -0.1});
  p.W_out = dmat(2, 2, {1.2, -0.5, 0.4, 0.9});
  p.b_out = dmat(1, 2, {0.1, 0.2});
  p.head_c_w = dmat(2, 4, {0.3, -0.2, 0.5, 0.1, -0.4, 0.6, -0.1, 0.2});
  p.head_c_b = dmat(1, 2, {0.2, -0.3});
  p.head_w_w = dmat(2, 4, {0.1, 0.4, -0.3, 0.2, 0.5, -0.2, 0.3, -0.4});
  p.head_w_b = dmat(1, 2, {-0.5, 0.4});
  p.head_pos = dmat(1, 2, {1.0, 0.7});
  return p;
}

inline Sample tiny_anchor() { return sample(0, matrix(2, 3, {1, 0, -1, 0.5f, 2, 0}), matrix(3, 2, {1, -1, 0.5f, 0.25f, -2, 1})); }
inline Sample tiny_sim() { return sample(1, matrix(1, 3, {0.25f, -1, 0.5f}), matrix(3, 2, {0, 1, 1, 1, -0.5f, 0.75f})); }
inline Sample tiny_dis() { return sample(2, matrix(2, 3, {-1, 0.5f, 1, 0, 0, 2}), matrix(2, 2, {1, 0, 0, -1})); }

inline void expect_near(const RowVec& a, std::initializer_list<double> b, double tol) {
  ASSERT_EQ(static_cast<std::size_t>(a.size()), b.size());
  std::size_t i = 0;
  for (double v : b) {
    EXPECT_NEAR(a[static_cast<Eigen::Index>(i)], v, tol) << "at " << i;
    ++i;
  }
}

}  // namespace psm::test
