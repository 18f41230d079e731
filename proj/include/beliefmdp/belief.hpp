#pragma once

#include "beliefmdp/core.hpp"

#include <variant>

namespace beliefmdp {

/// Belief with finitely many atoms. For finite-state models the atoms are
/// the state indices encoded as 1-vectors.
struct FiniteBelief {
  std::vector<Vec> states;
  std::vector<double> weights;

  static FiniteBelief over_indices(std::vector<double> w) {
    FiniteBelief b;
    b.weights = std::move(w);
    b.states.reserve(b.weights.size());
    for (std::size_t i = 0; i < b.weights.size(); ++i)
      b.states.push_back(Vec::Constant(1, static_cast<double>(i)));
    return b;
  }
  static FiniteBelief point_mass(const Vec& x) { return {{x}, {1.0}}; }
};

struct GaussianBelief {
  Vec mean;
  Mat cov;
};

/// Weighted particle cloud; `lineage_seed` is the seed of the step that
/// produced it.
struct ParticleBelief {
  std::vector<Vec> points;
  std::vector<double> weights;
  std::uint64_t lineage_seed = 0;
};

using Belief = std::variant<FiniteBelief, GaussianBelief, ParticleBelief>;

inline constexpr double kWeightSumTol = 1e-12;
inline constexpr double kCovTol = 1e-10;

namespace detail {
inline void check_weights(const std::vector<double>& w, std::size_t n_points, const char* what) {
  if (w.size() != n_points) throw InvalidArgument(std::string(what) + ": weights/points size mismatch");
  if (w.empty()) throw InvalidArgument(std::string(what) + ": empty support");
  double s = 0.0;
  for (double x : w) {
    if (!(x >= 0.0)) throw InvalidArgument(std::string(what) + ": negative or NaN weight");
    s += x;
  }
  if (std::abs(s - 1.0) > kWeightSumTol * std::max<double>(1.0, static_cast<double>(w.size()))) {
    throw InvalidArgument(std::string(what) + ": weights do not sum to 1", json{{"sum", s}});
  }
}
}  // namespace detail

/// Throws InvalidArgument if `b` violates its representation invariants.
inline void validate(const Belief& b) {
  std::visit(
      [](const auto& v) {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, FiniteBelief>) {
          detail::check_weights(v.weights, v.states.size(), "finite belief");
        } else if constexpr (std::is_same_v<T, ParticleBelief>) {
          detail::check_weights(v.weights, v.points.size(), "particle belief");
        } else {
          if (v.cov.rows() != v.mean.size() || v.cov.cols() != v.mean.size())
            throw InvalidArgument("gaussian belief: covariance shape");
          if (!is_symmetric(v.cov, kCovTol)) throw InvalidArgument("gaussian belief: covariance not symmetric");
          if (min_eigenvalue(v.cov) < -kCovTol) throw InvalidArgument("gaussian belief: covariance not PSD");
        }
      },
      b);
}

/// Checked in debug builds after every filter operation.
inline void debug_validate([[maybe_unused]] const Belief& b) {
#ifndef NDEBUG
  validate(b);
#endif
}

inline Eigen::Index belief_dim(const Belief& b) {
  return std::visit(
      [](const auto& v) -> Eigen::Index {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, FiniteBelief>) return v.states.front().size();
        else if constexpr (std::is_same_v<T, ParticleBelief>) return v.points.front().size();
        else return v.mean.size();
      },
      b);
}

inline Vec belief_mean(const Belief& b) {
  return std::visit(
      [](const auto& v) -> Vec {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, GaussianBelief>) {
          return v.mean;
        } else {
          const auto& pts = [&]() -> const std::vector<Vec>& {
            if constexpr (std::is_same_v<T, FiniteBelief>) return v.states;
            else return v.points;
          }();
          Vec m = Vec::Zero(pts.front().size());
          for (std::size_t i = 0; i < pts.size(); ++i) m += v.weights[i] * pts[i];
          return m;
        }
      },
      b);
}

inline Mat belief_cov(const Belief& b) {
  return std::visit(
      [&](const auto& v) -> Mat {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, GaussianBelief>) {
          return v.cov;
        } else {
          const auto& pts = [&]() -> const std::vector<Vec>& {
            if constexpr (std::is_same_v<T, FiniteBelief>) return v.states;
            else return v.points;
          }();
          const Vec m = belief_mean(b);
          Mat c = Mat::Zero(m.size(), m.size());
          for (std::size_t i = 0; i < pts.size(); ++i) {
            const Vec d = pts[i] - m;
            c += v.weights[i] * d * d.transpose();
          }
          return c;
        }
      },
      b);
}

/// Entropy in nats: Shannon for finite beliefs, differential for Gaussians,
/// Shannon entropy of the weights for particle sets.
inline double belief_entropy(const Belief& b) {
  if (const auto* f = std::get_if<FiniteBelief>(&b)) {
    double h = 0.0;
    for (double w : f->weights)
      if (w > 0.0) h -= w * std::log(w);
    return h;
  }
  if (const auto* g = std::get_if<GaussianBelief>(&b)) {
    // Differential entropy 0.5 log det(2 pi e cov); -inf when singular.
    const Eigen::SelfAdjointEigenSolver<Mat> es(g->cov, Eigen::EigenvaluesOnly);
    double h = 0.0;
    for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
      const double lam = es.eigenvalues()[i];
      if (!(lam > 0.0)) return -kInf;
      h += 0.5 * std::log(2.0 * M_PI * M_E * lam);
    }
    return h;
  }
  // Particles: Shannon entropy of the weights (log n when uniform).
  const auto& p = std::get<ParticleBelief>(b);
  double h = 0.0;
  for (double w : p.weights)
    if (w > 0.0) h -= w * std::log(w);
  return h;
}

inline std::size_t belief_support_size(const Belief& b) {
  if (const auto* f = std::get_if<FiniteBelief>(&b)) {
    return static_cast<std::size_t>(std::count_if(f->weights.begin(), f->weights.end(), [](double w) { return w > 0.0; }));
  }
  if (const auto* p = std::get_if<ParticleBelief>(&b)) return p->points.size();
  return 0;
}

/// Draw one state from `b`.
inline Vec sample_belief(const Belief& b, Rng& rng) {
  return std::visit(
      [&](const auto& v) -> Vec {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, GaussianBelief>) {
          const Mat f = psd_sqrt_factor(v.cov);
          Vec z(v.mean.size());
          for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = standard_normal(rng);
          return v.mean + f * z;
        } else {
          const auto& pts = [&]() -> const std::vector<Vec>& {
            if constexpr (std::is_same_v<T, FiniteBelief>) return v.states;
            else return v.points;
          }();
          const double u = uniform_open(rng);
          double acc = 0.0;
          for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
            acc += v.weights[i];
            if (u < acc) return pts[i];
          }
          return pts.back();
        }
      },
      b);
}

inline json to_json(const Belief& b) {
  return std::visit(
      [](const auto& v) -> json {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, GaussianBelief>) {
          return {{"type", "gaussian"}, {"mean", to_json_vec(v.mean)}, {"cov", to_json_mat(v.cov)}};
        } else {
          json pts = json::array();
          const auto& src = [&]() -> const std::vector<Vec>& {
            if constexpr (std::is_same_v<T, FiniteBelief>) return v.states;
            else return v.points;
          }();
          for (const auto& p : src) pts.push_back(to_json_vec(p));
          json j = {{"type", std::is_same_v<T, FiniteBelief> ? "finite" : "particle"},
                    {"points", pts},
                    {"weights", v.weights}};
          if constexpr (std::is_same_v<T, ParticleBelief>) j["lineage_seed"] = v.lineage_seed;
          return j;
        }
      },
      b);
}

inline Belief belief_from_json(const json& j) {
  const auto type = j.at("type").get<std::string>();
  if (type == "gaussian") return GaussianBelief{vec_from_json(j.at("mean")), mat_from_json(j.at("cov"), true)};
  if (type == "finite" || type == "particle") {
    std::vector<Vec> pts;
    if (j.contains("points")) {
      for (const auto& p : j.at("points")) pts.push_back(vec_from_json(p));
    }
    auto w = j.at("weights").get<std::vector<double>>();
    if (pts.empty()) {
      for (std::size_t i = 0; i < w.size(); ++i) pts.push_back(Vec::Constant(1, static_cast<double>(i)));
    }
    Belief b = type == "finite" ? Belief(FiniteBelief{std::move(pts), std::move(w)})
                                : Belief(ParticleBelief{std::move(pts), std::move(w), j.value("lineage_seed", 0ULL)});
    validate(b);
    return b;
  }
  throw InvalidArgument("unknown belief type '" + type + "'");
}

}  // namespace beliefmdp
