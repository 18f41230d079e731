#pragma once

#include "beliefmdp/jacobian.hpp"
#include "beliefmdp/model.hpp"

#include <iomanip>
#include <ostream>
#include <sstream>

namespace beliefmdp {

// ---------------------------------------------------------------------------
// Representations

struct EmpiricalKernel {
  std::vector<Vec> points;
  std::vector<double> weights;
};

/// Rectilinear grid with uniformly spaced nodes on each axis.
struct RectGrid {
  std::vector<std::vector<double>> axes;

  static RectGrid uniform(const Box& box, std::size_t per_axis) {
    RectGrid g;
    for (Eigen::Index k = 0; k < box.dim(); ++k) g.axes.push_back(linspace(box.lo[k], box.hi[k], per_axis));
    return g;
  }

  std::size_t dim() const { return axes.size(); }
  std::size_t size() const {
    std::size_t s = 1;
    for (const auto& a : axes) s *= a.size();
    return s;
  }
  std::vector<std::size_t> counts() const {
    std::vector<std::size_t> c;
    for (const auto& a : axes) c.push_back(a.size());
    return c;
  }
  double spacing(std::size_t k) const { return axes[k].size() > 1 ? axes[k][1] - axes[k][0] : 1.0; }
  double cell_volume() const {
    double v = 1.0;
    for (std::size_t k = 0; k < dim(); ++k) v *= spacing(k);
    return v;
  }
  /// Node at flat index i (last axis fastest).
  Vec node(std::size_t i) const {
    Vec x(static_cast<Eigen::Index>(dim()));
    for (std::size_t k = dim(); k-- > 0;) {
      const std::size_t n = axes[k].size();
      x[static_cast<Eigen::Index>(k)] = axes[k][i % n];
      i /= n;
    }
    return x;
  }
  /// Flat index of the node whose cell contains x, or -1 outside the grid.
  long long cell_of(const Vec& x) const {
    long long flat = 0;
    for (std::size_t k = 0; k < dim(); ++k) {
      const auto& ax = axes[k];
      const double h = spacing(k);
      const double t = (x[static_cast<Eigen::Index>(k)] - ax.front()) / h + 0.5;
      if (!(t >= 0.0) || t >= static_cast<double>(ax.size())) return -1;
      flat = flat * static_cast<long long>(ax.size()) + static_cast<long long>(std::floor(t));
    }
    return flat;
  }
  bool same_as(const RectGrid& o, double tol = 1e-12) const {
    if (o.axes.size() != axes.size()) return false;
    for (std::size_t k = 0; k < axes.size(); ++k) {
      if (o.axes[k].size() != axes[k].size()) return false;
      for (std::size_t i = 0; i < axes[k].size(); ++i)
        if (std::abs(o.axes[k][i] - axes[k][i]) > tol * (1.0 + std::abs(axes[k][i]))) return false;
    }
    return true;
  }
};

struct GriddedDensity {
  RectGrid grid;
  std::vector<double> values;

  double riemann_mass() const {
    double s = 0.0;
    for (double v : values) s += v;
    return s * grid.cell_volume();
  }
};

/// kappa(.|s2) as an empirical cloud or a density on a grid.
struct KernelEstimate {
  std::variant<EmpiricalKernel, GriddedDensity> rep;
  /// Parameter s2, sample size or grid resolution, seed.
  json source = json::object();

  bool is_empirical() const { return std::holds_alternative<EmpiricalKernel>(rep); }
  const EmpiricalKernel& empirical() const { return std::get<EmpiricalKernel>(rep); }
  const GriddedDensity& gridded() const { return std::get<GriddedDensity>(rep); }
  Eigen::Index dim() const {
    if (is_empirical()) return empirical().points.empty() ? 0 : empirical().points.front().size();
    return static_cast<Eigen::Index>(gridded().grid.dim());
  }
};

inline void validate(const KernelEstimate& k) {
  if (k.is_empirical()) {
    const auto& e = k.empirical();
    require(e.points.size() == e.weights.size() && !e.points.empty(), "empirical kernel: size mismatch or empty");
    double s = 0.0;
    for (double w : e.weights) {
      require(w >= 0.0, "empirical kernel: negative weight");
      s += w;
    }
    require(std::abs(s - 1.0) <= 1e-12 * std::max(1.0, std::sqrt(static_cast<double>(e.weights.size()))),
            "empirical kernel: weights do not sum to 1");
  } else {
    const auto& g = k.gridded();
    require(g.values.size() == g.grid.size(), "gridded density: value count mismatch");
    for (double v : g.values) require(v >= 0.0, "gridded density: negative value");
    const double mass = g.riemann_mass();
    require(std::abs(mass - 1.0) <= 1e-3, "gridded density: Riemann sum differs from 1 by more than 1e-3");
  }
}

/// Weighted mean of an empirical kernel.
inline Vec kernel_mean(const EmpiricalKernel& e) {
  Vec m = Vec::Zero(e.points.front().size());
  for (std::size_t i = 0; i < e.points.size(); ++i) m += e.weights[i] * e.points[i];
  return m;
}

inline Mat kernel_cov(const EmpiricalKernel& e) {
  const Vec m = kernel_mean(e);
  Mat c = Mat::Zero(m.size(), m.size());
  for (std::size_t i = 0; i < e.points.size(); ++i) {
    const Vec d = e.points[i] - m;
    c += e.weights[i] * d * d.transpose();
  }
  return c;
}

// ---------------------------------------------------------------------------
// Pushforward kernels

/// Points phi(s2, omega_i) for omega_i ~ p drawn from `seed`, weights
/// 1/n. The omega stream depends only on (p, seed, n_samples), so two calls
/// with different s2 and the same seed use common random numbers.
inline KernelEstimate pushforward_kernel(const ParamMap& phi, const NoiseDistribution& p, const Vec& s2,
                                         long long n_samples, std::uint64_t seed) {
  if (n_samples < 1) throw InvalidArgument("pushforward_kernel: n_samples must be >= 1");
  const auto omegas = p.sample(seed, n_samples);
  EmpiricalKernel e;
  e.points.resize(omegas.size());
  e.weights.assign(omegas.size(), 1.0 / static_cast<double>(omegas.size()));
  const std::size_t blocks = (omegas.size() + NoiseDistribution::kBlock - 1) / NoiseDistribution::kBlock;
  std::vector<std::string> failures(blocks);
  parallel_for(blocks, [&](std::size_t b) {
    const std::size_t end = std::min(omegas.size(), (b + 1) * NoiseDistribution::kBlock);
    for (std::size_t i = b * NoiseDistribution::kBlock; i < end; ++i) {
      try {
        e.points[i] = phi(s2, omegas[i]);
      } catch (const std::exception& ex) {
        failures[b] = ex.what();
        return;
      }
      if (!e.points[i].allFinite()) {
        failures[b] = "non-finite value";
        return;
      }
    }
  });
  for (std::size_t b = 0; b < blocks; ++b) {
    if (!failures[b].empty())
      throw NumericFailure("pushforward_kernel: map evaluation failed: " + failures[b],
                           json{{"s2", to_json_vec(s2)}, {"block", b}});
  }
  return {std::move(e), json{{"s2", to_json_vec(s2)}, {"n_samples", n_samples}, {"seed", seed}, {"mode", "empirical"}}};
}

/// phi(s2, xi) = F(x, a, xi) with s2 = (x, a).
inline ParamMap transition_map(const StochasticControlModel& m) {
  return [&m](const Vec& s2, const Vec& xi) {
    return step_state(m, s2.head(m.state_dim), s2.segment(m.state_dim, m.action_dim), xi);
  };
}

/// T(.|x, a) as an empirical cloud.
inline KernelEstimate transition_kernel(const StochasticControlModel& m, const Vec& x, const Vec& a,
                                        long long n_samples, std::uint64_t seed) {
  require_dim(x, m.state_dim, "state");
  require_dim(a, m.action_dim, "action");
  return pushforward_kernel(transition_map(m), m.mu, concat(x, a), n_samples, seed);
}

/// Q(.|a, x') as an empirical cloud (POMDP flavor).
inline KernelEstimate observation_kernel(const StochasticControlModel& m, const Vec& a, const Vec& x_next,
                                         long long n_samples, std::uint64_t seed) {
  if (m.flavor != Flavor::POMDP) throw InvalidArgument("observation_kernel: model is POMDP1; use observation_kernel1");
  require_dim(a, m.action_dim, "action");
  require_dim(x_next, m.state_dim, "next state");
  ParamMap phi = [&m](const Vec& s2, const Vec& eta) {
    return observe(m, s2.head(m.action_dim), s2.tail(m.state_dim), eta);
  };
  return pushforward_kernel(phi, m.nu, concat(a, x_next), n_samples, seed);
}

/// Q1(.|x, a) as an empirical cloud (POMDP1 flavor).
inline KernelEstimate observation_kernel1(const StochasticControlModel& m, const Vec& x, const Vec& a,
                                          long long n_samples, std::uint64_t seed) {
  if (m.flavor != Flavor::POMDP1) throw InvalidArgument("observation_kernel1: model is POMDP; use observation_kernel");
  require_dim(x, m.state_dim, "state");
  require_dim(a, m.action_dim, "action");
  ParamMap phi = [&m](const Vec& s2, const Vec& eta) {
    return observe1(m, s2.head(m.state_dim), s2.tail(m.action_dim), eta);
  };
  return pushforward_kernel(phi, m.nu, concat(x, a), n_samples, seed);
}

/// Substream used for the observation noise inside joint draws.
inline std::uint64_t observation_stream(std::uint64_t seed) { return derive_seed(seed, 0x6f6273ULL); }

/// Joint law P(.|x, a) of (x', y') on R^{d+m}. The xi stream is the one
/// transition_kernel uses for the same seed, so the x'-block reproduces it
/// point for point.
inline KernelEstimate joint_kernel(const StochasticControlModel& m, const Vec& x, const Vec& a, long long n_samples,
                                   std::uint64_t seed) {
  require_dim(x, m.state_dim, "state");
  require_dim(a, m.action_dim, "action");
  if (n_samples < 1) throw InvalidArgument("joint_kernel: n_samples must be >= 1");
  const auto xis = m.mu.sample(seed, n_samples);
  const auto etas = m.nu.sample(observation_stream(seed), n_samples);
  EmpiricalKernel e;
  e.points.resize(xis.size());
  e.weights.assign(xis.size(), 1.0 / static_cast<double>(xis.size()));
  const std::size_t blocks = (xis.size() + NoiseDistribution::kBlock - 1) / NoiseDistribution::kBlock;
  std::vector<std::string> failures(blocks);
  parallel_for(blocks, [&](std::size_t b) {
    const std::size_t end = std::min(xis.size(), (b + 1) * NoiseDistribution::kBlock);
    try {
      for (std::size_t i = b * NoiseDistribution::kBlock; i < end; ++i) {
        const Vec xn = step_state(m, x, a, xis[i]);
        const Vec y = emit_observation(m, x, a, xn, etas[i]);
        e.points[i] = concat(xn, y);
      }
    } catch (const std::exception& ex) {
      failures[b] = ex.what();
    }
  });
  for (std::size_t b = 0; b < blocks; ++b)
    if (!failures[b].empty()) throw NumericFailure("joint_kernel: " + failures[b], json{{"block", b}});
  return {std::move(e),
          json{{"s2", to_json_vec(concat(x, a))}, {"n_samples", n_samples}, {"seed", seed}, {"mode", "empirical"},
               {"flavor", to_string(m.flavor)}}};
}

// ---------------------------------------------------------------------------
// Densities by change of variables

struct DensityEvaluation {
  double value = 0.0;
  bool in_image = false;  ///< Newton converged from some start
  int iterations = 0;
  Vec preimage;
  double abs_det = 0.0;
};

struct ChangeOfVariablesOptions {
  std::size_t n_starts = 8;
  NewtonOptions newton{};
  double singularity_tol = kSingularityTol;
  /// Box the Newton starts are spread over; defaults to p's support hint.
  std::optional<Box> start_box;
};

/// Density of kappa(.|s2) at s1 for kappa the pushforward of p under
/// phi(s2, .): f(phi^{-1}(s1)) / |det D_omega phi| at the preimage, and 0
/// when no start converges (s1 taken to be outside the image).
inline DensityEvaluation density_via_change_of_variables(const ParamMap& phi, const NoiseDistribution& p,
                                                         const Vec& s2, const Vec& s1,
                                                         const ChangeOfVariablesOptions& opt = {},
                                                         const std::vector<Vec>* warm_starts = nullptr) {
  if (!p.has_density()) throw InvalidArgument("density_via_change_of_variables: noise law has no density");
  require(s1.size() == p.dim(), "density_via_change_of_variables: point and noise dimensions differ");
  const Box box = opt.start_box ? *opt.start_box
                                : (p.support_hint() ? *p.support_hint() : Box::cube(p.dim(), -5.0, 5.0));
  std::vector<Vec> starts;
  if (warm_starts) starts = *warm_starts;
  const auto coarse = coarse_starts(box, opt.n_starts);
  starts.insert(starts.end(), coarse.begin(), coarse.end());
  const auto inv = invert_map(phi, s2, s1, starts, opt.newton);
  DensityEvaluation out;
  out.iterations = inv.iterations;
  if (!inv.converged) return out;
  out.in_image = true;
  out.preimage = inv.omega;
  const Mat J = jacobian_fd(phi, s2, inv.omega);
  out.abs_det = std::abs(J.determinant());
  if (!(out.abs_det > opt.singularity_tol)) {
    throw NumericFailure("density_via_change_of_variables: Jacobian numerically singular at the preimage",
                         json{{"s2", to_json_vec(s2)}, {"s1", to_json_vec(s1)}, {"omega", to_json_vec(inv.omega)},
                              {"abs_det", out.abs_det}});
  }
  out.value = p.density(inv.omega) / out.abs_det;
  return out;
}

inline constexpr std::size_t kDefaultGridResolution = 201;

/// Bounding box of phi(s2, .) over a grid on p's support hint, for every
/// s2 in `params`; padded by `pad` of its width on each side.
inline Box image_bounding_box(const ParamMap& phi, const NoiseDistribution& p, const std::vector<Vec>& params,
                              std::size_t per_axis = 41, double pad = 0.0) {
  require(p.support_hint().has_value(), "image_bounding_box: noise law without support hint");
  const Box& sb = *p.support_hint();
  const auto n = static_cast<std::size_t>(sb.dim());
  std::size_t res = per_axis;
  while (res > 3 && std::pow(static_cast<double>(res), static_cast<double>(n)) > 2e5) --res;
  std::vector<std::vector<double>> axes(n);
  for (std::size_t k = 0; k < n; ++k) {
    const auto i = static_cast<Eigen::Index>(k);
    axes[k] = sb.hi[i] > sb.lo[i] ? linspace(sb.lo[i], sb.hi[i], res) : std::vector<double>{sb.lo[i]};
  }
  std::vector<std::size_t> counts;
  for (const auto& a : axes) counts.push_back(a.size());
  Vec lo, hi;
  bool first = true;
  for (const auto& s2 : params) {
    for_each_multi_index(counts, [&](const std::vector<std::size_t>& idx) {
      Vec w(static_cast<Eigen::Index>(n));
      for (std::size_t k = 0; k < n; ++k) w[static_cast<Eigen::Index>(k)] = axes[k][idx[k]];
      const Vec v = phi(s2, w);
      if (!v.allFinite()) return;
      if (first) {
        lo = hi = v;
        first = false;
      } else {
        lo = lo.cwiseMin(v);
        hi = hi.cwiseMax(v);
      }
    });
  }
  require(!first, "image_bounding_box: map produced no finite values");
  const Vec width = (hi - lo).cwiseMax(1e-9);
  return {lo - pad * width, hi + pad * width};
}

/// kappa(.|s2) as a density on a uniform grid over `box`, evaluated node by
/// node with density_via_change_of_variables. Not renormalized.
inline KernelEstimate gridded_density(const ParamMap& phi, const NoiseDistribution& p, const Vec& s2, const Box& box,
                                      std::size_t per_axis = kDefaultGridResolution,
                                      const ChangeOfVariablesOptions& opt = {}) {
  GriddedDensity g;
  g.grid = RectGrid::uniform(box, per_axis);
  g.values.assign(g.grid.size(), 0.0);
  std::vector<int> iterations(g.values.size(), 0);
  parallel_for(g.values.size(), [&](std::size_t i) {
    const auto ev = density_via_change_of_variables(phi, p, s2, g.grid.node(i), opt);
    g.values[i] = ev.value;
    iterations[i] = ev.iterations;
  });
  long long total_iter = 0;
  for (int it : iterations) total_iter += it;
  return {std::move(g), json{{"s2", to_json_vec(s2)},
                             {"grid_resolution", per_axis},
                             {"mode", "gridded"},
                             {"newton_iterations", total_iter}}};
}

/// Histogram density of an empirical kernel on the cells of `grid`
/// (cells centered at the nodes). Mass outside the grid is dropped.
inline GriddedDensity histogram_density(const EmpiricalKernel& e, const RectGrid& grid) {
  GriddedDensity g{grid, std::vector<double>(grid.size(), 0.0)};
  const double inv_vol = 1.0 / grid.cell_volume();
  for (std::size_t i = 0; i < e.points.size(); ++i) {
    const long long c = grid.cell_of(e.points[i]);
    if (c >= 0) g.values[static_cast<std::size_t>(c)] += e.weights[i] * inv_vol;
  }
  return g;
}

/// L1 distance between two densities on the same grid (Riemann sum).
inline double l1_distance(const GriddedDensity& a, const GriddedDensity& b) {
  require(a.grid.same_as(b.grid), "l1_distance: grid mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) s += std::abs(a.values[i] - b.values[i]);
  return s * a.grid.cell_volume();
}

// ---------------------------------------------------------------------------
// Serialization

inline json to_json(const KernelEstimate& k) {
  json j = {{"source", k.source}};
  if (k.is_empirical()) {
    const auto& e = k.empirical();
    json pts = json::array();
    for (const auto& p : e.points) pts.push_back(to_json_vec(p));
    j["representation"] = "empirical";
    j["points"] = std::move(pts);
    j["weights"] = e.weights;
  } else {
    const auto& g = k.gridded();
    j["representation"] = "gridded";
    j["grid"] = g.grid.axes;
    j["values"] = g.values;
  }
  return j;
}

inline KernelEstimate kernel_from_json(const json& j) {
  KernelEstimate k;
  k.source = j.value("source", json::object());
  const auto rep = j.at("representation").get<std::string>();
  if (rep == "empirical") {
    EmpiricalKernel e;
    for (const auto& p : j.at("points")) e.points.push_back(vec_from_json(p));
    e.weights = j.at("weights").get<std::vector<double>>();
    k.rep = std::move(e);
  } else if (rep == "gridded") {
    GriddedDensity g;
    g.grid.axes = j.at("grid").get<std::vector<std::vector<double>>>();
    g.values = j.at("values").get<std::vector<double>>();
    k.rep = std::move(g);
  } else {
    throw InvalidArgument("unknown kernel representation '" + rep + "'");
  }
  return k;
}

/// Shortest decimal text that round-trips the double.
inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os.imbue(std::locale::classic());
  os << std::setprecision(17) << v;
  return os.str();
}

/// CSV with header "dim0,...,dimk,weight", LF line endings.
inline void write_points_csv(std::ostream& os, const EmpiricalKernel& e) {
  const Eigen::Index n = e.points.empty() ? 0 : e.points.front().size();
  for (Eigen::Index k = 0; k < n; ++k) os << "dim" << k << ',';
  os << "weight\n";
  for (std::size_t i = 0; i < e.points.size(); ++i) {
    for (Eigen::Index k = 0; k < n; ++k) os << format_number(e.points[i][k]) << ',';
    os << format_number(e.weights[i]) << '\n';
  }
}

}  // namespace beliefmdp
