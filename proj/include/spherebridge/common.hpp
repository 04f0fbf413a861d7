#pragma once
// Shared plumbing: typed errors, deterministic RNG streams, seed derivation,
// and a minimal fork-join parallel_for. All numerics downstream are f64.

#include <cmath>
#include <cstdint>
#include <exception>
#include <initializer_list>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

namespace spherebridge {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr double kPi = 3.14159265358979323846;

enum class ErrorCode {
  AntipodalPoints,
  OutOfHorizon,
  EmptyDataset,
  StaleTape,
  NonFiniteGradient,
  NonFiniteState,
  FormatMismatch,
  CorruptFile,
  DivergenceModeUnsupported,
  MissingColumns,
  EmptyAfterFiltering,
  BoundViolation,
  BadWeights,
  IoError,
  MissingCheckpoint,
  ShapeMismatch,
  ConfigError,
};

inline const char* error_code_name(ErrorCode c) {
  switch (c) {
    case ErrorCode::AntipodalPoints: return "AntipodalPoints";
    case ErrorCode::OutOfHorizon: return "OutOfHorizon";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::StaleTape: return "StaleTape";
    case ErrorCode::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::NonFiniteState: return "NonFiniteState";
    case ErrorCode::FormatMismatch: return "FormatMismatch";
    case ErrorCode::CorruptFile: return "CorruptFile";
    case ErrorCode::DivergenceModeUnsupported: return "DivergenceModeUnsupported";
    case ErrorCode::MissingColumns: return "MissingColumns";
    case ErrorCode::EmptyAfterFiltering: return "EmptyAfterFiltering";
    case ErrorCode::BoundViolation: return "BoundViolation";
    case ErrorCode::BadWeights: return "BadWeights";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::MissingCheckpoint: return "MissingCheckpoint";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::ConfigError: return "ConfigError";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& msg)
      : std::runtime_error(msg), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void raise(ErrorCode code, const std::string& msg) {
  throw Error(code, msg);
}

// ---------------------------------------------------------------------------
// Seed derivation. Every random stream in the project is derived from the run
// seed plus a list of stable words (stream tags, iteration indices, worker
// ids), so resuming a run or re-running a phase reproduces the same draws
// without replaying history.

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline constexpr std::uint64_t mix_seed(std::uint64_t seed,
                                        std::initializer_list<std::uint64_t> words) {
  std::uint64_t h = splitmix64(seed ^ 0x5b8d2f00c1a4e9d7ULL);
  for (std::uint64_t w : words) h = splitmix64(h ^ w);
  return h;
}

// FNV-1a over the tag text; used to name independent streams.
inline constexpr std::uint64_t stream_tag(const char* s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (; *s != '\0'; ++s) h = (h ^ static_cast<unsigned char>(*s)) * 0x100000001b3ULL;
  return h;
}

// ---------------------------------------------------------------------------
// Deterministic RNG. Wraps mt19937_64 with hand-rolled transforms so draw
// sequences do not depend on the standard library's distribution internals.

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  // Uniform on [0, 1), 53 bits.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller with a cached second draw: consumes
  // exactly two uniforms per pair.
  double normal() {
    if (cached_) {
      cached_ = false;
      return cache_;
    }
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * kPi * u2;
    cache_ = r * std::sin(a);
    cached_ = true;
    return r * std::cos(a);
  }

  Eigen::Vector3d normal3() {
    double a = normal(), b = normal(), c = normal();
    return {a, b, c};
  }

  std::uint64_t raw() { return eng_(); }

  // floor(uniform * n); bias is O(n / 2^53), negligible for index draws.
  int index(int n) {
    int i = static_cast<int>(uniform() * static_cast<double>(n));
    return i < n ? i : n - 1;
  }

 private:
  std::mt19937_64 eng_;
  bool cached_ = false;
  double cache_ = 0.0;
};

// ---------------------------------------------------------------------------
// Fork-join loop over [0, n) split into `workers` contiguous chunks. Chunk
// boundaries depend only on (n, workers), so reductions that accumulate
// per-chunk partials in chunk order are deterministic for a fixed worker
// count. body(begin, end, worker_index).

template <typename Body>
void parallel_for(int workers, std::int64_t n, Body&& body) {
  if (n <= 0) return;
  std::int64_t w = std::min<std::int64_t>(std::max(workers, 1), n);
  if (w == 1) {
    body(std::int64_t{0}, n, 0);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(w));
  std::exception_ptr err;
  std::mutex err_mu;
  for (std::int64_t k = 0; k < w; ++k) {
    std::int64_t b = n * k / w;
    std::int64_t e = n * (k + 1) / w;
    pool.emplace_back([&body, &err, &err_mu, b, e, k] {
      try {
        body(b, e, static_cast<int>(k));
      } catch (...) {
        std::lock_guard<std::mutex> g(err_mu);
        if (!err) err = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

}  // namespace spherebridge
