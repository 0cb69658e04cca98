#pragma once

// Reduced-precision screening of the upper triangle of E*E^T for build_index.
// Each kernel streams approximate scores into per-row selectors that keep
// every candidate within `slack` of the running k-th best approximate score.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <thread>
#include <vector>

#include <cblas.h>

#if defined(__AVX512F__) || (defined(__AMX_TILE__) && defined(__AMX_BF16__))
#include <immintrin.h>
#endif
#if defined(__x86_64__)
#include <cpuid.h>
#endif
#if defined(__linux__)
#include <sys/syscall.h>
#include <unistd.h>
#endif

namespace psm::detail {

// Per-row candidate buffers for one worker. Row i appends (j, approx) while
// approx >= low[i]; when its buffer fills, the k-th best approximate score
// seen so far is recomputed and everything below it minus `slack` dropped.
// Rows with many near-ties spill into an overflow vector.
struct SelectorBank {
  std::uint32_t n;
  std::uint32_t k;
  std::uint32_t cap;
  float slack;
  std::vector<Neighbor> buf;  // n x cap
  std::vector<std::uint32_t> count;
  std::vector<float> low;
  std::vector<std::vector<Neighbor>> overflow;

  SelectorBank(std::uint32_t n_, std::uint32_t k_, float s)
      : n(n_),
        k(k_),
        cap(2 * k_ + 32),
        slack(s),
        buf(std::size_t(n_) * cap),
        count(n_, 0),
        low(n_, -std::numeric_limits<float>::infinity()),
        overflow(n_) {}

  void add(std::uint32_t i, std::uint32_t j, float v) {
    std::uint32_t& c = count[i];
    buf[std::size_t(i) * cap + c] = {j, v};
    if (++c == cap) compact(i);
  }

  void compact(std::uint32_t i) {
    Neighbor* b = buf.data() + std::size_t(i) * cap;
    auto& of = overflow[i];
    of.insert(of.end(), b, b + count[i]);
    count[i] = 0;
    if (of.size() >= k) {
      std::vector<float> scores(of.size());
      for (std::size_t t = 0; t < of.size(); ++t) scores[t] = of[t].score;
      std::nth_element(scores.begin(), scores.begin() + (k - 1), scores.end(), std::greater<>{});
      low[i] = std::max(low[i], scores[k - 1] - slack);
      const float lo = low[i];
      std::erase_if(of, [lo](const Neighbor& x) { return x.score < lo; });
    }
    if (of.size() <= cap / 2) {
      std::copy(of.begin(), of.end(), b);
      count[i] = static_cast<std::uint32_t>(of.size());
      of.clear();
    }
  }

  // Everything retained for row i (unordered).
  void collect(std::uint32_t i, std::vector<Neighbor>& out) const {
    const Neighbor* b = buf.data() + std::size_t(i) * cap;
    out.insert(out.end(), b, b + count[i]);
    out.insert(out.end(), overflow[i].begin(), overflow[i].end());
  }
};

// Feeds the pairs (i, j), j > i, of an approximate score block into `bank`.
// block(r, c) is the score of (i0 + r, j0 + c).
inline void scan_block(SelectorBank& bank, const float* block, std::size_t ld, std::uint32_t i0, std::uint32_t rows,
                       std::uint32_t j0, std::uint32_t cols) {
  const std::uint32_t n = bank.n;
  rows = std::min(rows, n > i0 ? n - i0 : 0);
  cols = std::min(cols, n > j0 ? n - j0 : 0);
  float* low = bank.low.data();
  for (std::uint32_t r = 0; r < rows; ++r) {
    const std::uint32_t i = i0 + r;
    const float* row = block + r * ld;
    std::uint32_t c = (i + 1 > j0) ? std::min(cols, i + 1 - j0) : 0;
    auto visit = [&](std::uint32_t cc) {
      const float v = row[cc];
      const std::uint32_t j = j0 + cc;
      if (v >= low[i]) bank.add(i, j, v);
      if (v >= low[j]) bank.add(j, i, v);
    };
#if defined(__AVX512F__)
    for (; c + 16 <= cols; c += 16) {
      const __m512 v = _mm512_loadu_ps(row + c);
      __mmask16 hit = _mm512_cmp_ps_mask(v, _mm512_set1_ps(low[i]), _CMP_GE_OQ) |
                      _mm512_cmp_ps_mask(v, _mm512_loadu_ps(low + j0 + c), _CMP_GE_OQ);
      while (hit) [[unlikely]] {
        const unsigned bit = static_cast<unsigned>(__builtin_ctz(hit));
        hit &= static_cast<__mmask16>(hit - 1);
        visit(c + bit);
      }
    }
#endif
    for (; c < cols; ++c) {
      const float v = row[c];
      if (v >= low[i] || v >= low[j0 + c]) [[unlikely]]
        visit(c);
    }
  }
}

inline double max_row_norm_sq(const EmbeddingMatrix& e) {
  double m = 0.0;
  for (std::uint32_t i = 0; i < e.n(); ++i) {
    double ss = 0.0;
    for (float v : e.row(i)) ss += double(v) * double(v);
    m = std::max(m, ss);
  }
  return m;
}

// Margin that keeps the exact top-k inside the screened candidates.
// With |approx - score| <= E for every pair, the exact top-k of a row all
// have approx >= kth_approx - 2E. `rel` bounds the screening error relative
// to |a||b|; cosine_score itself is within 2^-24 |a||b| (+ double rounding)
// of the exact product.
inline float screening_slack(double rel, double max_norm_sq) {
  const double canon = std::ldexp(1.0, -23);
  const double err = (rel + canon) * max_norm_sq + 1e-9;
  return static_cast<float>(2.0 * err * (1.0 + 1e-3));
}

template <class Body>
void run_workers(unsigned workers, Body&& body) {
  std::vector<std::thread> pool;
  for (unsigned w = 1; w < workers; ++w) pool.emplace_back(body, w);
  body(0u);
  for (auto& th : pool) th.join();
}

// ---------------------------------------------------------------------------
// float32 GEMM screening (any CPU).

inline std::vector<SelectorBank> screen_sgemm(const EmbeddingMatrix& e, std::uint32_t k, unsigned workers) {
  constexpr std::uint32_t kBlock = 1024;
  const std::uint32_t n = e.n();
  const std::uint32_t d = e.dim();
  const double u = std::ldexp(1.0, -24);
  const double gamma = d * u / (1.0 - d * u);
  const float slack = screening_slack(gamma, max_row_norm_sq(e));

  struct Tile {
    std::uint32_t i0, j0;
  };
  std::vector<Tile> tiles;
  for (std::uint32_t i0 = 0; i0 < n; i0 += kBlock)
    for (std::uint32_t j0 = i0; j0 < n; j0 += kBlock) tiles.push_back({i0, j0});
  workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(tiles.size())));

  std::vector<SelectorBank> banks;
  banks.reserve(workers);
  for (unsigned w = 0; w < workers; ++w) banks.emplace_back(n, k, slack);

  std::atomic<std::size_t> next{0};
  run_workers(workers, [&](unsigned w) {
    std::vector<float> buf(std::size_t(kBlock) * kBlock);
    for (;;) {
      const std::size_t t = next.fetch_add(1);
      if (t >= tiles.size()) return;
      const auto [i0, j0] = tiles[t];
      const std::uint32_t bi = std::min(kBlock, n - i0);
      const std::uint32_t bj = std::min(kBlock, n - j0);
      cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, static_cast<int>(bi), static_cast<int>(bj),
                  static_cast<int>(d), 1.0f, e.data() + std::size_t(i0) * d, static_cast<int>(d),
                  e.data() + std::size_t(j0) * d, static_cast<int>(d), 0.0f, buf.data(), static_cast<int>(bj));
      scan_block(banks[w], buf.data(), bj, i0, bi, j0, bj);
    }
  });
  return banks;
}

// ---------------------------------------------------------------------------
// bf16 tile screening (Intel AMX).

inline bool amx_available() {
#if defined(__AMX_TILE__) && defined(__AMX_BF16__) && defined(__linux__) && defined(__x86_64__)
  static const bool ok = [] {
    unsigned a = 0, b = 0, c = 0, d = 0;
    if (!__get_cpuid_count(7, 0, &a, &b, &c, &d)) return false;
    const bool tile = (d >> 24) & 1u;
    const bool bf16 = (d >> 22) & 1u;
    if (!tile || !bf16) return false;
    constexpr long kReqXcompPerm = 0x1023;
    constexpr long kXfeatureTileData = 18;
    return syscall(SYS_arch_prctl, kReqXcompPerm, kXfeatureTileData) == 0;
  }();
  return ok;
#else
  return false;
#endif
}

inline std::uint16_t to_bf16_rne(float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, sizeof u);
  u += 0x7fffu + ((u >> 16) & 1u);
  return static_cast<std::uint16_t>(u >> 16);
}

inline float from_bf16(std::uint16_t h) {
  const std::uint32_t u = std::uint32_t(h) << 16;
  float f;
  std::memcpy(&f, &u, sizeof f);
  return f;
}

#if defined(__AMX_TILE__) && defined(__AMX_BF16__)

struct alignas(64) TileConfig {
  std::uint8_t palette = 1;
  std::uint8_t start_row = 0;
  std::uint8_t reserved[14] = {};
  std::uint16_t colsb[16] = {};
  std::uint8_t rows[16] = {};
};

inline std::vector<SelectorBank> screen_amx_bf16(const EmbeddingMatrix& e, std::uint32_t k, unsigned workers) {
  constexpr std::uint32_t kStrip = 128;  // anchor rows per work item
  constexpr std::uint32_t kCols = 128;   // columns per score block
  const std::uint32_t n = e.n();
  const std::uint32_t d = e.dim();
  const std::uint32_t d_pad = (d + 31) / 32 * 32;
  const std::uint32_t kchunks = d_pad / 32;
  const std::uint32_t n_pad = (n + 31) / 32 * 32;

  // A operand: row-major bf16, rows padded to n_pad, cols to d_pad.

  // With a = a_hat + da (da exact in double), |a.b - a_hat.b_hat| <=
  // |a_hat||db| + |da||b|. Products of bf16 values are exact in fp32 and the
  // fp32 accumulation over d terms adds gamma_d |a_hat||b_hat|. Flush-to-zero
  // of sub-2^-126 terms is covered by the absolute floor in screening_slack.
  std::vector<std::uint16_t> a(std::size_t(n_pad) * d_pad, 0);
  double max_resid = 0.0, max_hat = 0.0, max_norm = 0.0;
  for (std::uint32_t i = 0; i < n; ++i) {
    auto r = e.row(i);
    double rr = 0.0, hh = 0.0, nn = 0.0;
    for (std::uint32_t t = 0; t < d; ++t) {
      const std::uint16_t h = to_bf16_rne(r[t]);
      a[std::size_t(i) * d_pad + t] = h;
      const double hv = from_bf16(h);
      rr += (double(r[t]) - hv) * (double(r[t]) - hv);
      hh += hv * hv;
      nn += double(r[t]) * double(r[t]);
    }
    max_resid = std::max(max_resid, std::sqrt(rr));
    max_hat = std::max(max_hat, std::sqrt(hh));
    max_norm = std::max(max_norm, std::sqrt(nn));
  }
  const double u = std::ldexp(1.0, -24);
  const double gamma = d * u / (1.0 - d * u);
  const double screen_err = max_resid * (max_hat + max_norm) + gamma * max_hat * max_hat;
  const float slack = screening_slack(screen_err / (max_norm * max_norm), max_norm * max_norm);

  // B operand: for each 16-row group of E and each 32-wide k chunk, a 16x16
  // tile of bf16 pairs, pair row = k/2, column = sample within the group.
  std::vector<std::uint32_t> bp(std::size_t(n_pad / 16) * kchunks * 256, 0);
  for (std::uint32_t g = 0; g < n_pad / 16; ++g)
    for (std::uint32_t kc = 0; kc < kchunks; ++kc) {
      std::uint32_t* tile = bp.data() + (std::size_t(g) * kchunks + kc) * 256;
      for (std::uint32_t kp = 0; kp < 16; ++kp)
        for (std::uint32_t c = 0; c < 16; ++c) {
          const std::size_t src = std::size_t(g * 16 + c) * d_pad + kc * 32 + 2 * kp;
          tile[kp * 16 + c] = std::uint32_t(a[src]) | (std::uint32_t(a[src + 1]) << 16);
        }
    }

  const std::uint32_t strips = (n + kStrip - 1) / kStrip;
  workers = std::max(1u, std::min(workers, strips));
  std::vector<SelectorBank> banks;
  banks.reserve(workers);
  for (unsigned w = 0; w < workers; ++w) banks.emplace_back(n, k, slack);

  std::atomic<std::uint32_t> next{0};
  run_workers(workers, [&](unsigned w) {
    TileConfig cfg;
    for (int t = 0; t < 8; ++t) {
      cfg.rows[t] = 16;
      cfg.colsb[t] = 64;
    }
    _tile_loadconfig(&cfg);
    alignas(64) float block[kStrip * kCols];
    const std::size_t a_stride = std::size_t(d_pad) * 2;
    for (;;) {
      const std::uint32_t s = next.fetch_add(1);
      if (s >= strips) break;
      const std::uint32_t i0 = s * kStrip;
      const std::uint32_t strip_rows = std::min(kStrip, n_pad - i0);
      for (std::uint32_t j0 = i0; j0 < n_pad; j0 += kCols) {
        const std::uint32_t cols = std::min(kCols, n_pad - j0);
        std::uint32_t rows_done = 0;
        for (std::uint32_t rp = 0; rp < strip_rows; rp += 32) {
          const std::uint32_t r0 = i0 + rp;
          if (r0 >= j0 + cols) break;  // the rest is strictly below the diagonal
          const std::uint16_t* a0 = a.data() + std::size_t(r0) * d_pad;
          const std::uint16_t* a1 = a0 + std::size_t(16) * d_pad;
          for (std::uint32_t jc = 0; jc < cols; jc += 32) {
            float* out = block + std::size_t(rp) * kCols + jc;
            if (r0 >= j0 + jc + 32) {
              for (std::uint32_t r = 0; r < 32; ++r) std::fill_n(out + r * kCols, 32, -2.0f);
              continue;
            }
            const std::uint32_t* b0 = bp.data() + std::size_t((j0 + jc) / 16) * kchunks * 256;
            const std::uint32_t* b1 = b0 + std::size_t(kchunks) * 256;
            _tile_zero(0);
            _tile_zero(1);
            _tile_zero(2);
            _tile_zero(3);
            for (std::uint32_t kc = 0; kc < kchunks; ++kc) {
              _tile_loadd(4, a0 + kc * 32, a_stride);
              _tile_loadd(5, a1 + kc * 32, a_stride);
              _tile_loadd(6, b0 + std::size_t(kc) * 256, 64);
              _tile_loadd(7, b1 + std::size_t(kc) * 256, 64);
              _tile_dpbf16ps(0, 4, 6);
              _tile_dpbf16ps(1, 4, 7);
              _tile_dpbf16ps(2, 5, 6);
              _tile_dpbf16ps(3, 5, 7);
            }
            _tile_stored(0, out, kCols * 4);
            _tile_stored(1, out + 16, kCols * 4);
            _tile_stored(2, out + 16 * kCols, kCols * 4);
            _tile_stored(3, out + 16 * kCols + 16, kCols * 4);
          }
          rows_done = rp + 32;
        }
        scan_block(banks[w], block, kCols, i0, rows_done, j0, cols);
      }
    }
    _tile_release();
  });
  return banks;
}

#else

inline std::vector<SelectorBank> screen_amx_bf16(const EmbeddingMatrix& e, std::uint32_t k, unsigned workers) {
  return screen_sgemm(e, k, workers);
}

#endif

}  // namespace psm::detail
