#pragma once

// Positive-sample mining: for every anchor query, the k most similar other
// queries (cosine similarity of frozen sentence embeddings) form the similar
// subset; every other sample except the anchor is dissimilar. Only the
// similar indices (and their scores) are stored.
//
// PSMI layout (u32 little-endian unless noted):
//   "PSMI" | version=1 | n | k | n*k u32 indices | n*k float32 scores

#include <algorithm>
#include <array>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <utility>
#include <vector>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

#include "psm/common.hpp"
#include "psm/corpus.hpp"

namespace psm {

// Rows are unit-L2 sentence embeddings, stored as float32 row-major.
class EmbeddingMatrix {
 public:
  static constexpr double kUnitTolerance = 1e-6;

  EmbeddingMatrix() = default;

  // Takes ownership of `data` (n x d, row-major) and validates unit norms.
  EmbeddingMatrix(std::uint32_t n, std::uint32_t d, std::vector<float> data)
      : n_(n), d_(d), data_(std::move(data)) {
    require(data_.size() == std::size_t(n_) * d_, ErrorKind::dimension_mismatch,
            "embedding payload length != n*d");
    for (std::uint32_t i = 0; i < n_; ++i) {
      double ss = 0.0;
      for (float v : row(i)) {
        require(std::isfinite(v), ErrorKind::non_finite, "embedding contains NaN/Inf");
        ss += double(v) * double(v);
      }
      require(std::abs(std::sqrt(ss) - 1.0) <= kUnitTolerance, ErrorKind::invalid_argument,
              "embedding row " + std::to_string(i) + " is not unit-norm");
    }
  }

  // Rows are L2-normalized (in double, then rounded) when `normalize` is set.
  static EmbeddingMatrix from_features(const FeatureMatrix& m, bool normalize = true) {
    validate(m);
    std::vector<float> data = m.data;
    if (normalize) {
      for (std::uint32_t i = 0; i < m.rows; ++i) {
        float* r = data.data() + std::size_t(i) * m.cols;
        double ss = 0.0;
        for (std::uint32_t c = 0; c < m.cols; ++c) ss += double(r[c]) * double(r[c]);
        require(ss > 0.0, ErrorKind::degenerate, "embedding row " + std::to_string(i) + " has zero norm");
        const double inv = 1.0 / std::sqrt(ss);
        for (std::uint32_t c = 0; c < m.cols; ++c) r[c] = static_cast<float>(double(r[c]) * inv);
      }
    }
    return EmbeddingMatrix(m.rows, m.cols, std::move(data));
  }

  FeatureMatrix to_features() const {
    FeatureMatrix m(n_, d_);
    m.data = data_;
    return m;
  }

  std::uint32_t n() const { return n_; }
  std::uint32_t dim() const { return d_; }
  const float* data() const { return data_.data(); }
  std::span<const float> row(std::size_t i) const { return {data_.data() + i * d_, d_}; }

 private:
  std::uint32_t n_ = 0;
  std::uint32_t d_ = 0;
  std::vector<float> data_;
};

// ---------------------------------------------------------------------------
// Reference embedder: hashed bag of words. Tokens are maximal runs of ASCII
// alphanumerics, lower-cased; bucket = FNV-1a-64(token) mod d_e.

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char ch : text) {
    if (std::isalnum(ch)) {
      cur.push_back(static_cast<char>(std::tolower(ch)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

inline EmbeddingMatrix embed_texts_reference(const std::vector<std::string>& texts, std::uint32_t d_e) {
  require(!texts.empty(), ErrorKind::invalid_argument, "no texts to embed");
  require(d_e >= 1, ErrorKind::invalid_argument, "embedding dimension must be >= 1");
  std::vector<float> data(texts.size() * std::size_t(d_e), 0.0f);
  std::vector<double> counts(d_e);
  for (std::size_t i = 0; i < texts.size(); ++i) {
    auto toks = tokenize(texts[i]);
    require(!toks.empty(), ErrorKind::invalid_argument, "query " + std::to_string(i) + " has no tokens");
    std::fill(counts.begin(), counts.end(), 0.0);
    for (const auto& t : toks) counts[fnv1a64(t) % d_e] += 1.0;
    double ss = 0.0;
    for (double c : counts) ss += c * c;
    const double inv = 1.0 / std::sqrt(ss);
    for (std::uint32_t b = 0; b < d_e; ++b) data[i * d_e + b] = static_cast<float>(counts[b] * inv);
  }
  return EmbeddingMatrix(static_cast<std::uint32_t>(texts.size()), d_e, std::move(data));
}

inline EmbeddingMatrix embed_queries_reference(const Corpus& corpus, std::uint32_t d_e = 384) {
  require(corpus.size() > 0, ErrorKind::invalid_argument, "corpus is empty");
  std::vector<std::string> texts;
  texts.reserve(corpus.size());
  for (const auto& s : corpus.samples) texts.push_back(s.query_text);
  return embed_texts_reference(texts, d_e);
}

// ---------------------------------------------------------------------------
// Similarity score. Float products are exact in double, so the value below
// does not depend on FMA contraction; the 16 independent lanes and the fixed
// reduction tree make it a well-defined function of the two rows. It is
// symmetric in its arguments.

inline float cosine_score(std::span<const float> a, std::span<const float> b) {
  const std::size_t d = a.size();
  alignas(64) double acc[16] = {};
  std::size_t t = 0;
#if defined(__AVX512F__)
  __m512d lo = _mm512_setzero_pd();
  __m512d hi = _mm512_setzero_pd();
  for (; t + 16 <= d; t += 16) {
    lo = _mm512_fmadd_pd(_mm512_cvtps_pd(_mm256_loadu_ps(a.data() + t)),
                         _mm512_cvtps_pd(_mm256_loadu_ps(b.data() + t)), lo);
    hi = _mm512_fmadd_pd(_mm512_cvtps_pd(_mm256_loadu_ps(a.data() + t + 8)),
                         _mm512_cvtps_pd(_mm256_loadu_ps(b.data() + t + 8)), hi);
  }
  _mm512_store_pd(acc, lo);
  _mm512_store_pd(acc + 8, hi);
#else
  for (; t + 16 <= d; t += 16)
    for (std::size_t l = 0; l < 16; ++l) acc[l] += double(a[t + l]) * double(b[t + l]);
#endif
  for (std::size_t l = 0; t + l < d; ++l) acc[l] += double(a[t + l]) * double(b[t + l]);
  for (std::size_t w = 8; w >= 1; w /= 2)
    for (std::size_t l = 0; l < w; ++l) acc[l] += acc[l + w];
  return static_cast<float>(acc[0]);
}

struct Neighbor {
  std::uint32_t index;
  float score;
};

// Strict weak order: higher score first, then lower index.
inline bool ranks_before(const Neighbor& a, const Neighbor& b) {
  return a.score != b.score ? a.score > b.score : a.index < b.index;
}

struct TopK {
  std::vector<std::uint32_t> indices;
  std::vector<float> scores;
};

inline TopK cosine_topk(const EmbeddingMatrix& e, std::uint32_t i, std::uint32_t k) {
  require(i < e.n(), ErrorKind::out_of_range, "anchor index out of range");
  require(k >= 1 && k + 1 <= e.n(), ErrorKind::out_of_range,
          "k must satisfy 1 <= k <= n-1 (k=" + std::to_string(k) + ", n=" + std::to_string(e.n()) + ")");
  instrumentation().topk_calls.fetch_add(1, std::memory_order_relaxed);
  std::vector<Neighbor> all;
  all.reserve(e.n() - 1);
  const auto anchor = e.row(i);
  for (std::uint32_t j = 0; j < e.n(); ++j)
    if (j != i) all.push_back({j, cosine_score(anchor, e.row(j))});
  std::nth_element(all.begin(), all.begin() + (k - 1), all.end(), ranks_before);
  std::sort(all.begin(), all.begin() + k, ranks_before);
  TopK out;
  for (std::uint32_t r = 0; r < k; ++r) {
    out.indices.push_back(all[r].index);
    out.scores.push_back(all[r].score);
  }
  return out;
}

// ---------------------------------------------------------------------------

struct MiningIndex {
  std::uint32_t n = 0;
  std::uint32_t k = 0;
  std::vector<std::uint32_t> sim_indices;  // n x k
  std::vector<float> sim_scores;           // n x k

  std::span<const std::uint32_t> row(std::size_t i) const { return {sim_indices.data() + i * k, k}; }
  std::span<const float> scores(std::size_t i) const { return {sim_scores.data() + i * k, k}; }

  // Restrict to the first k' <= k neighbors (rows are already ranked).
  MiningIndex truncated(std::uint32_t k2) const {
    require(k2 >= 1 && k2 <= k, ErrorKind::out_of_range, "cannot truncate index to k=" + std::to_string(k2));
    MiningIndex out{n, k2, {}, {}};
    for (std::uint32_t i = 0; i < n; ++i) {
      out.sim_indices.insert(out.sim_indices.end(), row(i).begin(), row(i).begin() + k2);
      out.sim_scores.insert(out.sim_scores.end(), scores(i).begin(), scores(i).begin() + k2);
    }
    return out;
  }

  bool operator==(const MiningIndex&) const = default;
};

enum class ScreenKernel { automatic, sgemm, amx_bf16 };

}  // namespace psm

#include "psm/detail/screen.hpp"

namespace psm {

inline void validate(const MiningIndex& idx) {
  require(idx.sim_indices.size() == std::size_t(idx.n) * idx.k && idx.sim_scores.size() == idx.sim_indices.size(),
          ErrorKind::dimension_mismatch, "mining index payload size != n*k");
  for (std::uint32_t i = 0; i < idx.n; ++i) {
    auto r = idx.row(i);
    auto s = idx.scores(i);
    for (std::uint32_t c = 0; c < idx.k; ++c) {
      require(r[c] < idx.n && r[c] != i, ErrorKind::invalid_argument,
              "mining index row " + std::to_string(i) + " has an invalid neighbor");
      require(std::isfinite(s[c]), ErrorKind::non_finite, "mining index score is not finite");
      if (c > 0)
        require(ranks_before({r[c - 1], s[c - 1]}, {r[c], s[c]}), ErrorKind::invalid_argument,
                "mining index row " + std::to_string(i) + " is not ranked");
    }
  }
}

struct BuildOptions {
  unsigned workers = 1;
  ScreenKernel kernel = ScreenKernel::automatic;
};

// Exact top-k index. The upper triangle of E*E^T is screened in reduced
// precision (bf16 tiles on AMX hardware, float32 GEMM otherwise). The
// screening error has a rigorous bound, so every pair that can belong to the
// exact top-k survives the filter; survivors are rescored with cosine_score
// and ranked with ranks_before. The result equals cosine_topk(e, i, k) for
// every row regardless of kernel or worker count.
inline MiningIndex build_index(const EmbeddingMatrix& e, std::uint32_t k, BuildOptions opts = {}) {
  const std::uint32_t n = e.n();
  require(n >= 2, ErrorKind::invalid_argument, "mining needs at least 2 samples");
  require(k >= 1 && k + 1 <= n, ErrorKind::out_of_range,
          "k must satisfy 1 <= k <= n-1 (k=" + std::to_string(k) + ", n=" + std::to_string(n) + ")");
  instrumentation().topk_calls.fetch_add(1, std::memory_order_relaxed);

  ScreenKernel kernel = opts.kernel;
  if (kernel == ScreenKernel::automatic)
    kernel = detail::amx_available() ? ScreenKernel::amx_bf16 : ScreenKernel::sgemm;
  require(kernel != ScreenKernel::amx_bf16 || detail::amx_available(), ErrorKind::invalid_argument,
          "AMX-BF16 screening requested but not available on this CPU");

  const unsigned workers = std::max(1u, opts.workers);
  std::vector<detail::SelectorBank> banks =
      kernel == ScreenKernel::amx_bf16 ? detail::screen_amx_bf16(e, k, workers) : detail::screen_sgemm(e, k, workers);
  const float slack = banks.front().slack;

  MiningIndex idx{n, k, std::vector<std::uint32_t>(std::size_t(n) * k), std::vector<float>(std::size_t(n) * k)};
  parallel_for(n, workers, [&](std::size_t i) {
    std::vector<Neighbor> cand;
    for (const auto& bank : banks) bank.collect(static_cast<std::uint32_t>(i), cand);
    std::vector<float> approx;
    approx.reserve(cand.size());
    for (const auto& c : cand) approx.push_back(c.score);
    std::nth_element(approx.begin(), approx.begin() + (k - 1), approx.end(), std::greater<>{});
    const float cutoff = approx[k - 1] - slack;
    std::erase_if(cand, [cutoff](const Neighbor& c) { return c.score < cutoff; });
    const auto anchor = e.row(i);
    for (std::size_t c = 0; c < cand.size(); ++c) {
      if (c + 1 < cand.size()) {
        const char* next_row = reinterpret_cast<const char*>(e.row(cand[c + 1].index).data());
        for (std::size_t off = 0; off < e.dim() * sizeof(float); off += 64) __builtin_prefetch(next_row + off);
      }
      cand[c].score = cosine_score(anchor, e.row(cand[c].index));
    }
    std::partial_sort(cand.begin(), cand.begin() + k, cand.end(), ranks_before);
    for (std::uint32_t r = 0; r < k; ++r) {
      idx.sim_indices[i * k + r] = cand[r].index;
      idx.sim_scores[i * k + r] = cand[r].score;
    }
  });
  return idx;
}

// ---------------------------------------------------------------------------

struct TrainingPair {
  std::uint32_t sim_id;
  std::uint32_t dis_id;
};

// sim uniform over the anchor's similar row; dis uniform over the complement
// of {anchor} U similar, drawn by rejection so the complement is never built.
template <class Rng>
TrainingPair draw_training_pair(const MiningIndex& index, std::uint32_t i, Rng& rng) {
  require(i < index.n, ErrorKind::out_of_range, "anchor index out of range");
  require(std::size_t(index.n) >= std::size_t(index.k) + 2, ErrorKind::invalid_argument,
          "dissimilar set is empty (need n >= k + 2)");
  instrumentation().pair_draws.fetch_add(1, std::memory_order_relaxed);
  const auto row = index.row(i);
  std::uniform_int_distribution<std::uint32_t> pick_sim(0, index.k - 1);
  const std::uint32_t sim = row[pick_sim(rng)];
  std::uniform_int_distribution<std::uint32_t> pick_any(0, index.n - 1);
  std::uint32_t dis;
  do {
    dis = pick_any(rng);
  } while (dis == i || std::find(row.begin(), row.end(), dis) != row.end());
  return {sim, dis};
}

// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kIndexFormatVersion = 1;

inline void save_index(const std::string& path, const MiningIndex& idx) {
  validate(idx);
  bin::Writer w(path);
  w.magic("PSMI");
  w.put<std::uint32_t>(kIndexFormatVersion);
  w.put<std::uint32_t>(idx.n);
  w.put<std::uint32_t>(idx.k);
  w.array<std::uint32_t>(idx.sim_indices);
  w.array<float>(idx.sim_scores);
  w.close();
}

inline MiningIndex load_index(const std::string& path) {
  bin::Reader r(path);
  r.expect_magic("PSMI");
  auto version = r.get<std::uint32_t>();
  require(version == kIndexFormatVersion, ErrorKind::bad_magic,
          "unsupported PSMI version " + std::to_string(version) + " in " + path);
  MiningIndex idx;
  idx.n = r.get<std::uint32_t>();
  idx.k = r.get<std::uint32_t>();
  const std::size_t nk = std::size_t(idx.n) * idx.k;
  require(r.remaining() == nk * 8, ErrorKind::truncated, "PSMI payload size mismatch: " + path);
  idx.sim_indices.resize(nk);
  idx.sim_scores.resize(nk);
  for (auto& v : idx.sim_indices) v = r.get<std::uint32_t>();
  for (auto& v : idx.sim_scores) v = r.get<float>();
  validate(idx);
  return idx;
}

}  // namespace psm
