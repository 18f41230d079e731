#pragma once

// Shared vocabulary: vectors, boxes, errors, seeding and the small
// numeric helpers every other header leans on.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>  // nlohmann/json (vendor/)

namespace beliefmdp {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using json = nlohmann::json;

inline constexpr double kInf = std::numeric_limits<double>::infinity();

// ---------------------------------------------------------------------------
// Errors

/// Base class for every error the library throws. `witness` carries a
/// machine-readable description of the failing input.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what, json witness = json::object())
      : std::runtime_error(what), witness_(std::move(witness)) {}
  const json& witness() const noexcept { return witness_; }

 private:
  json witness_;
};

/// Invalid arguments: bad dimensions, bad parameters, unknown names.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Numerical failure: singular Jacobians, singular innovation covariance,
/// evaluation failures.
class NumericFailure : public Error {
 public:
  using Error::Error;
};

/// Bayes update with a zero normalizer. The witness holds the prior.
class DegenerateUpdate : public NumericFailure {
 public:
  using NumericFailure::NumericFailure;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw InvalidArgument(msg);
}

inline void require_dim(const Vec& v, Eigen::Index n, const char* what) {
  if (v.size() != n) {
    throw InvalidArgument(std::string("dimension mismatch for ") + what + ": expected " +
                              std::to_string(n) + ", got " + std::to_string(v.size()),
                          json{{"expected", n}, {"actual", v.size()}});
  }
}

inline json to_json_vec(const Vec& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v[i]);
  return out;
}

inline Vec vec_from_json(const json& j) {
  if (j.is_number()) return Vec::Constant(1, j.get<double>());
  Vec v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
  return v;
}

inline json to_json_mat(const Mat& m) {
  json out = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    out.push_back(std::move(row));
  }
  return out;
}

/// Accepts a scalar (1x1), a flat list (treated as a diagonal when
/// `diag_if_flat`), or a list of rows.
inline Mat mat_from_json(const json& j, bool diag_if_flat = false) {
  if (j.is_number()) return Mat::Constant(1, 1, j.get<double>());
  if (j.empty()) return Mat(0, 0);
  if (!j[0].is_array()) {
    Vec v = vec_from_json(j);
    if (diag_if_flat) return v.asDiagonal();
    return Mat(v.transpose());
  }
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = static_cast<Eigen::Index>(j[0].size());
  Mat m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    require(static_cast<Eigen::Index>(j[r].size()) == cols, "ragged matrix in JSON");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = j[r][c].get<double>();
  }
  return m;
}

inline Vec concat(const Vec& a, const Vec& b) {
  Vec out(a.size() + b.size());
  out << a, b;
  return out;
}

// ---------------------------------------------------------------------------
// Seeding

/// splitmix64 finalizer; used to derive independent substreams.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seed of substream `index` of `seed`.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  return mix64(mix64(seed) ^ mix64(index + 0x632be59bd9b4e019ULL));
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed) { return Rng(mix64(seed)); }

/// Uniform double in the open interval (0, 1); never returns 0 or 1, so
/// it is safe to feed into inverse CDFs.
inline double uniform_open(Rng& rng) {
  constexpr double scale = 1.0 / 9007199254740992.0;  // 2^-53
  return (static_cast<double>(rng() >> 11) + 0.5) * scale;
}

// Box-Muller on uniform_open keeps normal draws independent of the
// standard library's distribution implementation.
inline double standard_normal(Rng& rng) {
  const double u1 = uniform_open(rng);
  const double u2 = uniform_open(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

// ---------------------------------------------------------------------------
// Boxes

/// Axis-aligned box [lo, hi] (or its interior, depending on the caller).
struct Box {
  Vec lo;
  Vec hi;

  Box() = default;
  Box(Vec l, Vec h) : lo(std::move(l)), hi(std::move(h)) {
    require(lo.size() == hi.size(), "box bounds of different dimension");
  }
  static Box cube(Eigen::Index n, double a, double b) {
    return {Vec::Constant(n, a), Vec::Constant(n, b)};
  }

  Eigen::Index dim() const { return lo.size(); }
  bool nondegenerate() const { return dim() > 0 && (hi.array() > lo.array()).all(); }
  bool contains(const Vec& x, double slack = 0.0) const {
    return ((x.array() >= lo.array() - slack) && (x.array() <= hi.array() + slack)).all();
  }
  bool contains_open(const Vec& x) const {
    return ((x.array() > lo.array()) && (x.array() < hi.array())).all();
  }
  Vec center() const { return 0.5 * (lo + hi); }
  double volume() const { return (hi - lo).prod(); }
};

inline json to_json(const Box& b) { return {{"lo", to_json_vec(b.lo)}, {"hi", to_json_vec(b.hi)}}; }
inline Box box_from_json(const json& j) { return {vec_from_json(j.at("lo")), vec_from_json(j.at("hi"))}; }

/// Evenly spaced nodes a, ..., b (inclusive), `n >= 2`.
inline std::vector<double> linspace(double a, double b, std::size_t n) {
  std::vector<double> out(n);
  if (n == 1) {
    out[0] = 0.5 * (a + b);
    return out;
  }
  const double h = (b - a) / static_cast<double>(n - 1);
  for (std::size_t i = 0; i < n; ++i) out[i] = a + h * static_cast<double>(i);
  out[n - 1] = b;
  return out;
}

/// Cell midpoints of an n-cell partition of (a, b); all strictly inside.
inline std::vector<double> midpoints(double a, double b, std::size_t n) {
  std::vector<double> out(n);
  const double h = (b - a) / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a + h * (static_cast<double>(i) + 0.5);
  return out;
}

/// Visits every multi-index of a tensor grid with `counts[k]` points on
/// axis k, last axis fastest.
template <class F>
void for_each_multi_index(const std::vector<std::size_t>& counts, F&& fn) {
  if (counts.empty()) {
    fn(std::vector<std::size_t>{});
    return;
  }
  for (auto c : counts)
    if (c == 0) return;
  std::vector<std::size_t> idx(counts.size(), 0);
  while (true) {
    fn(static_cast<const std::vector<std::size_t>&>(idx));
    std::size_t k = counts.size();
    while (k > 0) {
      --k;
      if (++idx[k] < counts[k]) break;
      idx[k] = 0;
      if (k == 0) return;
    }
  }
}

// ---------------------------------------------------------------------------
// Threads

/// Global worker count for the parallel loops (CLI `--threads`).
inline std::size_t& thread_count() {
  static std::size_t n = 1;
  return n;
}

/// Runs fn(i) for i in [0, n). Each index is handled exactly once, so
/// callers writing to slot i get results independent of scheduling.
template <class F>
void parallel_for(std::size_t n, F&& fn) {
  const std::size_t workers = std::min<std::size_t>(std::max<std::size_t>(thread_count(), 1), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

// ---------------------------------------------------------------------------
// Small linear-algebra helpers

inline bool is_symmetric(const Mat& m, double tol = 1e-10) {
  return m.rows() == m.cols() && (m - m.transpose()).cwiseAbs().maxCoeff() <= tol;
}

inline double min_eigenvalue(const Mat& m) {
  if (m.size() == 0) return 0.0;
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

inline bool is_psd(const Mat& m, double tol = 1e-10) {
  return is_symmetric(m, tol) && min_eigenvalue(m) >= -tol;
}

/// Square root factor L with L L^T = cov, valid for singular PSD input.
inline Mat psd_sqrt_factor(const Mat& cov) {
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (cov + cov.transpose()));
  Vec ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal();
}

}  // namespace beliefmdp
