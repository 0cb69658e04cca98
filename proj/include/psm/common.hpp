#pragma once

// Shared plumbing: error type, little-endian binary I/O, seeded stream
// derivation and a minimal fork/join loop.

#include <atomic>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <exception>
#include <fstream>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace psm {

enum class ErrorKind {
  io,
  bad_magic,
  truncated,
  non_finite,
  invalid_argument,
  dimension_mismatch,
  degenerate,
  out_of_range,
};

inline const char* to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::io: return "io";
    case ErrorKind::bad_magic: return "bad_magic";
    case ErrorKind::truncated: return "truncated";
    case ErrorKind::non_finite: return "non_finite";
    case ErrorKind::invalid_argument: return "invalid_argument";
    case ErrorKind::dimension_mismatch: return "dimension_mismatch";
    case ErrorKind::degenerate: return "degenerate";
    case ErrorKind::out_of_range: return "out_of_range";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) throw Error(kind, what);
}

// ---------------------------------------------------------------------------
// Little-endian binary I/O. Payloads are always little-endian on disk.

namespace bin {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <class T>
T byteswap_if_needed(T v) {
  if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}

class Writer {
 public:
  explicit Writer(const std::string& path) : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
    require(static_cast<bool>(out_), ErrorKind::io, "cannot open for writing: " + path);
  }

  void bytes(const void* data, std::size_t n) {
    out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    require(static_cast<bool>(out_), ErrorKind::io, "write failed: " + path_);
  }
  void magic(std::string_view m) { bytes(m.data(), m.size()); }

  template <class T>
  void put(T v) {
    v = byteswap_if_needed(v);
    bytes(&v, sizeof(T));
  }
  void str(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  template <class T, class Range>
  void array(const Range& r) {
    for (auto x : r) put<T>(static_cast<T>(x));
  }
  void close() {
    out_.close();
    require(!out_.fail(), ErrorKind::io, "close failed: " + path_);
  }

 private:
  std::string path_;
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::string& path) : path_(path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorKind::io, "cannot open: " + path);
    buf_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }

  std::size_t remaining() const { return buf_.size() - pos_; }
  const std::string& path() const { return path_; }

  void expect_magic(std::string_view m) {
    require(remaining() >= m.size() && std::memcmp(buf_.data() + pos_, m.data(), m.size()) == 0,
            ErrorKind::bad_magic, "expected magic '" + std::string(m) + "' in " + path_);
    pos_ += m.size();
  }

  void bytes(void* dst, std::size_t n) {
    require(remaining() >= n, ErrorKind::truncated, "unexpected end of file: " + path_);
    std::memcpy(dst, buf_.data() + pos_, n);
    pos_ += n;
  }

  template <class T>
  T get() {
    T v;
    bytes(&v, sizeof(T));
    return byteswap_if_needed(v);
  }
  std::string str() {
    auto n = get<std::uint32_t>();
    require(remaining() >= n, ErrorKind::truncated, "unexpected end of file: " + path_);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::string path_;
  std::vector<char> buf_;
  std::size_t pos_ = 0;
};

}  // namespace bin

// ---------------------------------------------------------------------------
// Seed derivation. Every random stream in the pipeline is derived from a root
// seed plus a tuple of integers so that results do not depend on scheduling.

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

template <class... Ts>
std::uint64_t derive_seed(std::uint64_t root, Ts... parts) {
  std::uint64_t s = splitmix64(root);
  ((s = splitmix64(s ^ static_cast<std::uint64_t>(parts))), ...);
  return s;
}

// ---------------------------------------------------------------------------
// Fork/join over [0, n). Work item i always runs exactly once; callers write
// results into slot i so output is independent of the worker count.

inline unsigned default_workers() {
  unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : hc;
}

inline void parallel_for(std::size_t n, unsigned workers, const std::function<void(std::size_t)>& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex err_mu;
  auto body = [&] {
    for (;;) {
      std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(err_mu);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  unsigned w = static_cast<unsigned>(std::min<std::size_t>(workers, n));
  pool.reserve(w - 1);
  for (unsigned t = 1; t < w; ++t) pool.emplace_back(body);
  body();
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

// ---------------------------------------------------------------------------
// Call counters for the training-only code paths. Tests use them to check
// that inference never touches mining or the PSM losses.

struct Instrumentation {
  std::atomic<std::uint64_t> topk_calls{0};
  std::atomic<std::uint64_t> pair_draws{0};
  std::atomic<std::uint64_t> psm_loss_calls{0};

  void reset() {
    topk_calls = 0;
    pair_draws = 0;
    psm_loss_calls = 0;
  }
};

inline Instrumentation& instrumentation() {
  static Instrumentation inst;
  return inst;
}

}  // namespace psm
