#pragma once

#include <atomic>
#include <bit>
#include <cstdint>
#include <cstring>
#include <random>
#include <string>
#include <vector>
#include <stdexcept>
#include <algorithm>
#include <numeric>
#include <thread>
#include <mutex>
#include <functional>
#include <fstream>
#include <filesystem>
#include <cmath>

namespace wsl {

class Error : public std::runtime_error {
public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Deterministic RNG. All randomness in the project flows through
// generators of this type, seeded explicitly.
using Rng = std::mt19937_64;

// Derives an independent stream from a root seed and a stream index,
// so parallel workers stay reproducible regardless of scheduling.
inline Rng make_rng(uint64_t root_seed, uint64_t stream) {
  std::seed_seq seq{root_seed, uint64_t{0x9e3779b97f4a7c15} ^ stream, stream};
  return Rng(seq);
}

// FNV-1a, used for layout/config/weight hashes.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a(const std::string& s, uint64_t h = 0xcbf29ce484222325ull) {
  return fnv1a(s.data(), s.size(), h);
}

inline std::string hash_hex(uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

// Little-endian binary IO. x86 is little-endian; the static_assert keeps
// the file formats honest if this is ever built elsewhere.
static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; add byte swaps for this platform");

inline void write_u32_le(std::ostream& os, uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}

inline uint32_t read_u32_le(std::istream& is) {
  uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  if (!is) throw Error("unexpected end of stream reading u32");
  return v;
}

inline void write_f32_le(std::ostream& os, const float* p, size_t n) {
  os.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * 4));
}

inline void read_f32_le(std::istream& is, float* p, size_t n) {
  is.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n * 4));
  if (!is) throw Error("unexpected end of stream reading f32 payload");
}

// Runs fn(i) for i in [0, n) on up to `threads` workers. Results must not
// depend on scheduling; callers keep determinism by indexing outputs by i.
inline void parallel_for(size_t n, const std::function<void(size_t)>& fn,
                         unsigned threads = std::thread::hardware_concurrency()) {
  if (threads <= 1 || n <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<size_t> next{0};
  std::vector<std::thread> pool;
  unsigned k = std::min<unsigned>(threads, static_cast<unsigned>(n));
  std::exception_ptr eptr = nullptr;
  std::mutex emu;
  for (unsigned t = 0; t < k; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        size_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lk(emu);
          if (!eptr) eptr = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (eptr) std::rethrow_exception(eptr);
}

// Fractional ranks with ties averaged (shared by rank statistics).
template <typename T>
std::vector<double> fractional_ranks(const std::vector<T>& v) {
  size_t n = v.size();
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), size_t{0});
  std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n, 0.0);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && !(v[idx[i]] < v[idx[j + 1]])) ++j;
    double r = 0.5 * static_cast<double>(i + j) + 1.0;  // average rank, 1-based
    for (size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

// Spearman rank correlation; returns 0 when either side is constant.
template <typename T>
double spearman(const std::vector<T>& x, const std::vector<T>& y) {
  if (x.size() != y.size() || x.size() < 2) throw Error("spearman: need two equal-length series");
  auto rx = fractional_ranks(x);
  auto ry = fractional_ranks(y);
  double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / rx.size();
  double my = std::accumulate(ry.begin(), ry.end(), 0.0) / ry.size();
  double sxy = 0, sxx = 0, syy = 0;
  for (size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

inline std::string read_text_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw Error("cannot open file: " + p.string());
  std::string s((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return s;
}

inline void write_text_file(const std::filesystem::path& p, const std::string& s) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  if (!f) throw Error("cannot write file: " + p.string());
  f << s;
}

// Atomic write: temp file in the same directory, then rename.
inline void write_file_atomic(const std::filesystem::path& p, const std::string& bytes) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  auto tmp = p;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw Error("cannot write file: " + tmp.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  std::filesystem::rename(tmp, p);
}

}  // namespace wsl
