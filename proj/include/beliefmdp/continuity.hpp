#pragma once

#include "beliefmdp/kernel.hpp"

#include <map>
#include <memory>
#include <numeric>

namespace beliefmdp {

// ---------------------------------------------------------------------------
// Total variation

struct DistanceEstimate {
  double value = 0.0;
  double band = 0.0;  ///< one standard error (0 for exact modes)
  std::string mode;
  bool upper_bound = false;
};

inline json to_json(const DistanceEstimate& d) {
  return {{"value", d.value}, {"band", d.band}, {"mode", d.mode}, {"upper_bound", d.upper_bound}};
}

namespace detail {

inline bool exact_source(const KernelEstimate& k) { return k.source.value("mode", "") == "exact"; }

inline void require_common_random_numbers(const KernelEstimate& a, const KernelEstimate& b, const char* who) {
  const auto& e1 = a.empirical();
  const auto& e2 = b.empirical();
  const bool seeds = a.source.contains("seed") && b.source.contains("seed") && a.source.at("seed") == b.source.at("seed");
  if (!seeds || e1.points.size() != e2.points.size()) {
    throw InvalidArgument(std::string(who) + ": empirical inputs must share seed and sample size (common random numbers)",
                          json{{"source_a", a.source}, {"source_b", b.source}});
  }
}

inline double sup_abs_diff(const Vec& a, const Vec& b) { return (a - b).cwiseAbs().maxCoeff(); }

}  // namespace detail

/// TV between two kernel slices.
///
/// Gridded pair: half the L1 distance on the common grid. Exact atoms
/// (source mode "exact"): half the l1 distance of the merged weights.
/// Empirical pair on common random numbers: the fraction of indices whose
/// points differ by more than atom_tol, an upper bound on the TV of the
/// coupled laws.
inline DistanceEstimate tv_distance(const KernelEstimate& k1, const KernelEstimate& k2, double atom_tol = 1e-12) {
  require(k1.dim() == k2.dim(), "tv_distance: dimension mismatch");
  DistanceEstimate out;
  if (!k1.is_empirical() && !k2.is_empirical()) {
    out.value = std::min(1.0, 0.5 * l1_distance(k1.gridded(), k2.gridded()));
    out.band = 0.5 * (std::abs(k1.gridded().riemann_mass() - 1.0) + std::abs(k2.gridded().riemann_mass() - 1.0));
    out.mode = "gridded_density";
    return out;
  }
  require(k1.is_empirical() && k2.is_empirical(), "tv_distance: cannot compare a gridded density with samples");
  const auto& e1 = k1.empirical();
  const auto& e2 = k2.empirical();
  if (detail::exact_source(k1) && detail::exact_source(k2)) {
    // Merge atoms that coincide within atom_tol.
    std::vector<std::pair<Vec, double>> atoms;
    auto add = [&](const Vec& p, double w) {
      for (auto& [q, acc] : atoms) {
        if (detail::sup_abs_diff(p, q) <= atom_tol) {
          acc += w;
          return;
        }
      }
      atoms.emplace_back(p, w);
    };
    for (std::size_t i = 0; i < e1.points.size(); ++i) add(e1.points[i], e1.weights[i]);
    for (std::size_t i = 0; i < e2.points.size(); ++i) add(e2.points[i], -e2.weights[i]);
    double s = 0.0;
    for (const auto& at : atoms) s += std::abs(at.second);
    out.value = std::min(1.0, 0.5 * s);
    out.mode = "exact_atoms";
    return out;
  }
  detail::require_common_random_numbers(k1, k2, "tv_distance");
  const std::size_t n = e1.points.size();
  double differ = 0.0;
  std::size_t count = 0;
  bool uniform = true;
  for (std::size_t i = 0; i < n; ++i) {
    uniform = uniform && e1.weights[i] == e1.weights[0];
    if (detail::sup_abs_diff(e1.points[i], e2.points[i]) > atom_tol) {
      differ += e1.weights[i];
      ++count;
    }
  }
  // Counting avoids the rounding of n additions of 1/n.
  if (uniform) differ = static_cast<double>(count) / static_cast<double>(n);
  out.value = std::min(1.0, differ);
  out.band = std::sqrt(out.value * (1.0 - out.value) / static_cast<double>(n));
  out.mode = "coupled_upper_bound";
  out.upper_bound = true;
  return out;
}

// ---------------------------------------------------------------------------
// Bounded-Lipschitz dictionary

/// Ridge test function with Lipschitz constant <= |w| <= 1 and values in
/// [-1, 1]: clamp(w.x - c, -1, 1) or min(1, max(0, w.x - c)).
struct RidgeFunction {
  Vec w;
  double c = 0.0;
  bool relu = false;
  bool constant = false;  ///< f == 1

  double operator()(const Vec& x) const {
    if (constant) return 1.0;
    const double t = w.dot(x) - c;
    return relu ? std::min(1.0, std::max(0.0, t)) : std::clamp(t, -1.0, 1.0);
  }
};

struct BlDictionary {
  std::vector<RidgeFunction> functions;
  std::uint64_t seed = 0;
};

inline json to_json(const BlDictionary& d) {
  json fs = json::array();
  for (const auto& f : d.functions) {
    if (f.constant) fs.push_back({{"kind", "constant"}});
    else fs.push_back({{"kind", f.relu ? "relu" : "clip"}, {"w", to_json_vec(f.w)}, {"c", f.c}});
  }
  return {{"seed", d.seed}, {"size", d.functions.size()}, {"functions", fs}};
}

/// `size` functions centred on randomly picked anchor points: the first
/// 2*dim are clipped coordinate maps, the rest random unit ridges, half
/// clipped and half ReLU.
inline BlDictionary make_bl_dictionary(Eigen::Index dim, std::size_t size, std::uint64_t seed,
                                       const std::vector<Vec>& anchors) {
  require(dim >= 1, "bl dictionary: dimension must be positive");
  BlDictionary d;
  d.seed = seed;
  Rng rng = make_rng(derive_seed(seed, 0xb1ULL));
  auto anchor = [&]() -> Vec {
    if (anchors.empty()) return Vec::Zero(dim);
    const auto i = static_cast<std::size_t>(uniform_open(rng) * static_cast<double>(anchors.size()));
    return anchors[std::min(i, anchors.size() - 1)];
  };
  for (std::size_t k = 0; k < size; ++k) {
    RidgeFunction f;
    if (k < static_cast<std::size_t>(2 * dim)) {
      f.w = Vec::Zero(dim);
      f.w[static_cast<Eigen::Index>(k % static_cast<std::size_t>(dim))] = 1.0;
      f.relu = k >= static_cast<std::size_t>(dim);
    } else {
      f.w.resize(dim);
      for (Eigen::Index j = 0; j < dim; ++j) f.w[j] = standard_normal(rng);
      const double nrm = f.w.norm();
      f.w = nrm > 0.0 ? Vec(f.w / nrm) : Vec(Vec::Unit(dim, 0));
      f.relu = (k % 2) == 1;
    }
    // Centre so the anchor sits in the sloped part.
    const double jitter = uniform_open(rng) - 0.5;
    f.c = f.w.dot(anchor()) + (f.relu ? jitter - 0.5 : jitter);
    d.functions.push_back(std::move(f));
  }
  return d;
}

namespace detail {

inline std::vector<Vec> anchor_points(const KernelEstimate& k, std::size_t max_points = 4096) {
  std::vector<Vec> out;
  if (k.is_empirical()) {
    const auto& e = k.empirical();
    const std::size_t stride = std::max<std::size_t>(1, e.points.size() / max_points);
    for (std::size_t i = 0; i < e.points.size(); i += stride)
      if (e.weights[i] > 0.0) out.push_back(e.points[i]);
  } else {
    const auto& g = k.gridded();
    const std::size_t stride = std::max<std::size_t>(1, g.values.size() / max_points);
    for (std::size_t i = 0; i < g.values.size(); i += stride)
      if (g.values[i] > 0.0) out.push_back(g.grid.node(i));
  }
  return out;
}

/// Values of f on every support point of k, with weights (density * cell
/// volume for grids).
inline void support_of(const KernelEstimate& k, std::vector<Vec>& pts, std::vector<double>& w) {
  pts.clear();
  w.clear();
  if (k.is_empirical()) {
    pts = k.empirical().points;
    w = k.empirical().weights;
  } else {
    const auto& g = k.gridded();
    const double vol = g.grid.cell_volume();
    for (std::size_t i = 0; i < g.values.size(); ++i) {
      if (g.values[i] == 0.0) continue;
      pts.push_back(g.grid.node(i));
      w.push_back(g.values[i] * vol);
    }
  }
}

}  // namespace detail

struct BlResult {
  DistanceEstimate estimate;
  std::size_t argmax = 0;
};

/// max over the dictionary of |int f dk1 - int f dk2|.
inline BlResult bl_distance(const KernelEstimate& k1, const KernelEstimate& k2, const BlDictionary& dict) {
  require(k1.dim() == k2.dim(), "bl_distance: dimension mismatch");
  require(!dict.functions.empty(), "bl_distance: empty dictionary");
  std::vector<Vec> p1, p2;
  std::vector<double> w1, w2;
  detail::support_of(k1, p1, w1);
  detail::support_of(k2, p2, w2);
  const bool paired = k1.is_empirical() && k2.is_empirical() && !detail::exact_source(k1) &&
                      !detail::exact_source(k2) && p1.size() == p2.size() && k1.source.contains("seed") &&
                      k2.source.contains("seed") && k1.source.at("seed") == k2.source.at("seed");
  const bool sampled = k1.is_empirical() && !detail::exact_source(k1);
  const std::size_t nf = dict.functions.size();
  std::vector<double> diff(nf), band(nf, 0.0);
  parallel_for(nf, [&](std::size_t j) {
    const auto& f = dict.functions[j];
    double s1 = 0.0, s2 = 0.0, q1 = 0.0, q2 = 0.0, qd = 0.0;
    for (std::size_t i = 0; i < p1.size(); ++i) {
      const double v = f(p1[i]);
      s1 += w1[i] * v;
      q1 += w1[i] * v * v;
      if (paired) {
        const double u = f(p2[i]);
        qd += w1[i] * (u - v) * (u - v);
      }
    }
    for (std::size_t i = 0; i < p2.size(); ++i) {
      const double v = f(p2[i]);
      s2 += w2[i] * v;
      q2 += w2[i] * v * v;
    }
    diff[j] = std::abs(s1 - s2);
    if (paired) {
      const double var = std::max(0.0, qd - (s2 - s1) * (s2 - s1));
      band[j] = std::sqrt(var / static_cast<double>(p1.size()));
    } else if (sampled) {
      const double v1 = std::max(0.0, q1 - s1 * s1), v2 = std::max(0.0, q2 - s2 * s2);
      band[j] = std::sqrt(v1 / static_cast<double>(p1.size()) + v2 / static_cast<double>(std::max<std::size_t>(1, p2.size())));
    }
  });
  BlResult r;
  for (std::size_t j = 1; j < nf; ++j)
    if (diff[j] > diff[r.argmax]) r.argmax = j;
  r.estimate.value = diff[r.argmax];
  r.estimate.band = band[r.argmax];
  r.estimate.mode = paired ? "bl_dictionary_paired" : (sampled ? "bl_dictionary_independent" : "bl_dictionary_exact");
  return r;
}

/// Convenience overload building the default dictionary from the pooled
/// support of both inputs.
inline BlResult bl_distance(const KernelEstimate& k1, const KernelEstimate& k2, std::size_t dictionary_size = 256,
                            std::uint64_t seed = 0) {
  auto anchors = detail::anchor_points(k1, 2048);
  const auto more = detail::anchor_points(k2, 2048);
  anchors.insert(anchors.end(), more.begin(), more.end());
  return bl_distance(k1, k2, make_bl_dictionary(k1.dim(), dictionary_size, seed, anchors));
}

// ---------------------------------------------------------------------------
// Continuity profiles

enum class ContinuityVerdict { Continuous, Discontinuous, Inconclusive };

inline const char* to_string(ContinuityVerdict v) {
  switch (v) {
    case ContinuityVerdict::Continuous: return "continuous";
    case ContinuityVerdict::Discontinuous: return "discontinuous";
    default: return "inconclusive";
  }
}

/// discontinuous: est - 3 band > floor; continuous: est + 3 band <= floor.
inline ContinuityVerdict continuity_verdict(double est, double band, double floor) {
  if (est - 3.0 * band > floor) return ContinuityVerdict::Discontinuous;
  if (est + 3.0 * band <= floor) return ContinuityVerdict::Continuous;
  return ContinuityVerdict::Inconclusive;
}

struct ProfileOptions {
  std::size_t dictionary_size = 256;
  double discontinuity_floor = 0.1;
  double atom_tol = 1e-12;
  /// Grid resolution per axis for TV through densities.
  std::size_t grid_resolution = kDefaultGridResolution;
  /// TV through change-of-variables densities when p has a density and the
  /// image has dimension <= 2; samples otherwise.
  bool use_density = true;
  double box_pad = 0.02;
};

struct ProfileEntry {
  double radius = 0.0;
  std::size_t direction = 0;
  DistanceEstimate tv;
  DistanceEstimate bl;
};

struct ContinuityProfile {
  Vec base_param;
  std::vector<double> radii;
  std::vector<Vec> directions;
  std::vector<ProfileEntry> entries;  ///< radius-major, direction-minor
  std::string tv_mode;
  ContinuityVerdict tv_verdict = ContinuityVerdict::Inconclusive;
  ContinuityVerdict bl_verdict = ContinuityVerdict::Inconclusive;
  double discontinuity_floor = 0.1;
  long long n_samples = 0;
  std::uint64_t seed = 0;
  BlDictionary dictionary;

  /// Worst direction at radius index i.
  const ProfileEntry& worst_tv(std::size_t i) const {
    const std::size_t nd = directions.size();
    const ProfileEntry* best = &entries[i * nd];
    for (std::size_t k = 1; k < nd; ++k)
      if (entries[i * nd + k].tv.value > best->tv.value) best = &entries[i * nd + k];
    return *best;
  }
  const ProfileEntry& worst_bl(std::size_t i) const {
    const std::size_t nd = directions.size();
    const ProfileEntry* best = &entries[i * nd];
    for (std::size_t k = 1; k < nd; ++k)
      if (entries[i * nd + k].bl.value > best->bl.value) best = &entries[i * nd + k];
    return *best;
  }
};

inline json to_json(const ContinuityProfile& p, bool include_dictionary = true) {
  json dirs = json::array(), rows = json::array();
  for (const auto& d : p.directions) dirs.push_back(to_json_vec(d));
  for (const auto& e : p.entries)
    rows.push_back({{"radius", e.radius}, {"direction", e.direction}, {"tv", to_json(e.tv)}, {"bl", to_json(e.bl)}});
  json j = {{"base_param", to_json_vec(p.base_param)},
            {"radii", p.radii},
            {"directions", dirs},
            {"entries", rows},
            {"tv_mode", p.tv_mode},
            {"tv_verdict", to_string(p.tv_verdict)},
            {"bl_verdict", to_string(p.bl_verdict)},
            {"discontinuity_floor", p.discontinuity_floor},
            {"n_samples", p.n_samples},
            {"seed", p.seed}};
  if (include_dictionary) j["dictionary"] = to_json(p.dictionary);
  return j;
}

/// radius,tv,tv_band,bl,bl_band with the worst direction per radius.
inline void write_profile_csv(std::ostream& os, const ContinuityProfile& p) {
  os << "radius,tv,tv_band,bl,bl_band\n";
  for (std::size_t i = 0; i < p.radii.size(); ++i) {
    const auto& t = p.worst_tv(i);
    const auto& b = p.worst_bl(i);
    os << format_number(p.radii[i]) << ',' << format_number(t.tv.value) << ',' << format_number(t.tv.band) << ','
       << format_number(b.bl.value) << ',' << format_number(b.bl.band) << '\n';
  }
}

/// Compares kappa(.|s2 + r u) with kappa(.|s2) for every radius r and unit
/// direction u, on common random numbers.
inline ContinuityProfile continuity_profile(const ParamMap& phi, const NoiseDistribution& p, const Vec& s2,
                                            const std::vector<double>& radii, const std::vector<Vec>& directions,
                                            long long n_samples, std::uint64_t seed, const ProfileOptions& opt = {}) {
  require(!radii.empty(), "continuity_profile: empty radius list");
  require(!directions.empty(), "continuity_profile: empty direction list");
  for (std::size_t i = 0; i < radii.size(); ++i) {
    require(radii[i] >= 0.0 && std::isfinite(radii[i]), "continuity_profile: radii must be finite and nonnegative");
    if (i > 0) require(radii[i] < radii[i - 1], "continuity_profile: radii must be strictly decreasing");
  }
  for (const auto& u : directions) {
    require(u.size() == s2.size(), "continuity_profile: direction dimension differs from the parameter");
    require(std::abs(u.norm() - 1.0) <= 1e-9, "continuity_profile: directions must be unit vectors");
  }

  ContinuityProfile prof;
  prof.base_param = s2;
  prof.radii = radii;
  prof.directions = directions;
  prof.discontinuity_floor = opt.discontinuity_floor;
  prof.n_samples = n_samples;
  prof.seed = seed;

  const auto base = pushforward_kernel(phi, p, s2, n_samples, seed);
  const Eigen::Index out_dim = base.dim();
  prof.dictionary = make_bl_dictionary(out_dim, opt.dictionary_size, seed, detail::anchor_points(base));

  std::vector<Vec> params;
  for (double r : radii)
    for (const auto& u : directions) params.push_back(s2 + r * u);

  const bool gridded = opt.use_density && p.has_density() && p.support_hint() && out_dim <= 2 && out_dim == p.dim();
  std::optional<KernelEstimate> base_grid;
  Box box;
  if (gridded) {
    std::vector<Vec> all = params;
    all.push_back(s2);
    box = image_bounding_box(phi, p, all, 41, opt.box_pad);
    base_grid = gridded_density(phi, p, s2, box, opt.grid_resolution);
    prof.tv_mode = "gridded_density";
  } else {
    prof.tv_mode = "coupled_upper_bound";
  }

  for (std::size_t i = 0; i < params.size(); ++i) {
    ProfileEntry e;
    e.radius = radii[i / directions.size()];
    e.direction = i % directions.size();
    const auto moved = pushforward_kernel(phi, p, params[i], n_samples, seed);
    if (gridded) {
      e.tv = tv_distance(*base_grid, gridded_density(phi, p, params[i], box, opt.grid_resolution));
    } else {
      e.tv = tv_distance(base, moved, opt.atom_tol);
    }
    e.bl = bl_distance(base, moved, prof.dictionary).estimate;
    prof.entries.push_back(std::move(e));
  }
  const std::size_t last = radii.size() - 1;
  const auto& wt = prof.worst_tv(last);
  const auto& wb = prof.worst_bl(last);
  prof.tv_verdict = continuity_verdict(wt.tv.value, wt.tv.band, opt.discontinuity_floor);
  prof.bl_verdict = continuity_verdict(wb.bl.value, wb.bl.band, opt.discontinuity_floor);
  return prof;
}

inline std::vector<double> dyadic_radii(std::size_t levels = 6) {
  std::vector<double> r;
  for (std::size_t k = 1; k <= levels; ++k) r.push_back(std::ldexp(1.0, -static_cast<int>(k)));
  return r;
}

// ---------------------------------------------------------------------------
// Semi-uniform Feller modulus

struct FellerOptions {
  std::size_t f_dictionary_size = 64;
  /// Partitions with 2^k cells for k = 0..y_partition_res.
  std::size_t y_partition_res = 6;
  long long n_samples = 20000;
  std::uint64_t seed = 0;
  /// Unit direction in (x, a) space; defaults to the first state axis.
  std::optional<Vec> direction;
  double discontinuity_floor = 0.1;
};

struct FellerRadiusEstimate {
  double radius = 0.0;
  double modulus = 0.0;
  double band = 0.0;
  /// Running max over partition levels 0..k; nondecreasing in k.
  std::vector<double> by_level;
  std::size_t best_function = 0;
  std::size_t best_level = 0;
  Box y_box;
};

struct FellerModulusReport {
  Vec x, a, direction;
  std::vector<FellerRadiusEstimate> estimates;
  BlDictionary dictionary;  ///< f family; entry 0 is the constant 1
  std::size_t y_partition_res = 0;
  long long n_samples = 0;
  std::uint64_t seed = 0;
  bool singular_inputs = false;
  std::string flavor;
  ContinuityVerdict verdict = ContinuityVerdict::Inconclusive;
};

inline json to_json(const FellerModulusReport& r, bool include_dictionary = true) {
  json est = json::array();
  for (const auto& e : r.estimates) {
    est.push_back({{"radius", e.radius},
                   {"modulus", e.modulus},
                   {"band", e.band},
                   {"by_level", e.by_level},
                   {"best_function", e.best_function},
                   {"best_level", e.best_level},
                   {"y_box", to_json(e.y_box)}});
  }
  json j = {{"x", to_json_vec(r.x)},
            {"a", to_json_vec(r.a)},
            {"direction", to_json_vec(r.direction)},
            {"estimates", est},
            {"partition", {{"kind", "dyadic_rectilinear"}, {"levels", r.y_partition_res}, {"cells_at_level_k", "2^k"}}},
            {"n_samples", r.n_samples},
            {"seed", r.seed},
            {"flavor", r.flavor},
            {"singular_inputs", r.singular_inputs},
            {"verdict", to_string(r.verdict)}};
  if (include_dictionary) j["f_dictionary"] = to_json(r.dictionary);
  return j;
}

namespace detail {

/// Cell of y in the level-k partition of `box`: axis j is split
/// 2^{floor(k/m) + [j < k mod m]} times.
inline std::vector<std::size_t> level_counts(std::size_t k, std::size_t m) {
  std::vector<std::size_t> c(m);
  for (std::size_t j = 0; j < m; ++j) c[j] = std::size_t{1} << (k / m + (j < k % m ? 1 : 0));
  return c;
}

inline std::size_t cell_index(const Vec& y, const Box& box, const std::vector<std::size_t>& counts) {
  std::size_t flat = 0;
  for (std::size_t j = 0; j < counts.size(); ++j) {
    const auto i = static_cast<Eigen::Index>(j);
    const double width = box.hi[i] - box.lo[i];
    std::size_t c = 0;
    if (width > 0.0) {
      const double t = (y[i] - box.lo[i]) / width * static_cast<double>(counts[j]);
      c = t <= 0.0 ? 0 : std::min(counts[j] - 1, static_cast<std::size_t>(t));
    }
    flat = flat * counts[j] + c;
  }
  return flat;
}

}  // namespace detail

/// Estimates sup_f sup_B |int f(x') P(dx', B | s2') - int f(x') P(dx', B | s2)|
/// with s2 = (x, a), s2' = s2 + r u. B ranges over unions of cells of
/// dyadic partitions of the pooled observation range; for a fixed
/// partition the sup over unions is max(sum of positive cell differences,
/// sum of negative ones).
inline FellerModulusReport feller_modulus(const StochasticControlModel& m, const Vec& x, const Vec& a,
                                          const std::vector<double>& radii, const FellerOptions& opt = {}) {
  require_dim(x, m.state_dim, "state");
  require_dim(a, m.action_dim, "action");
  require(!radii.empty(), "feller_modulus: empty radius list");
  for (double r : radii) require(r >= 0.0 && std::isfinite(r), "feller_modulus: radii must be finite and nonnegative");
  const Eigen::Index d = m.state_dim, l = m.action_dim;
  Vec u = opt.direction ? *opt.direction : Vec(Vec::Unit(d + l, 0));
  require(u.size() == d + l && std::abs(u.norm() - 1.0) <= 1e-9, "feller_modulus: direction must be a unit vector in (x, a)");

  FellerModulusReport rep;
  rep.x = x;
  rep.a = a;
  rep.direction = u;
  rep.y_partition_res = opt.y_partition_res;
  rep.n_samples = opt.n_samples;
  rep.seed = opt.seed;
  rep.flavor = to_string(m.flavor);
  rep.singular_inputs = !m.mu.has_density() || !m.nu.has_density();

  auto split = [&](const KernelEstimate& k, std::vector<Vec>& xs, std::vector<Vec>& ys) {
    const auto& e = k.empirical();
    xs.resize(e.points.size());
    ys.resize(e.points.size());
    for (std::size_t i = 0; i < e.points.size(); ++i) {
      xs[i] = e.points[i].head(d);
      ys[i] = e.points[i].tail(m.obs_dim);
    }
  };
  const auto base = joint_kernel(m, x, a, opt.n_samples, opt.seed);
  std::vector<Vec> xb, yb;
  split(base, xb, yb);
  const std::size_t n = xb.size();

  rep.dictionary = make_bl_dictionary(d, opt.f_dictionary_size, opt.seed, xb);
  RidgeFunction one;
  one.constant = true;
  rep.dictionary.functions.insert(rep.dictionary.functions.begin(), one);
  const std::size_t nf = rep.dictionary.functions.size();

  // f values at the base points, reused across radii.
  std::vector<double> fb(n * nf);
  parallel_for(n, [&](std::size_t i) {
    for (std::size_t j = 0; j < nf; ++j) fb[i * nf + j] = rep.dictionary.functions[j](xb[i]);
  });

  const auto mo = static_cast<std::size_t>(m.obs_dim);
  for (double r : radii) {
    const Vec s = concat(x, a) + r * u;
    const auto moved = joint_kernel(m, s.head(d), s.tail(l), opt.n_samples, opt.seed);
    std::vector<Vec> xp, yp;
    split(moved, xp, yp);
    std::vector<double> fp(n * nf);
    parallel_for(n, [&](std::size_t i) {
      for (std::size_t j = 0; j < nf; ++j) fp[i * nf + j] = rep.dictionary.functions[j](xp[i]);
    });

    FellerRadiusEstimate est;
    est.radius = r;
    Box yb_box{yb[0], yb[0]};
    for (std::size_t i = 0; i < n; ++i) {
      yb_box.lo = yb_box.lo.cwiseMin(yb[i]).cwiseMin(yp[i]);
      yb_box.hi = yb_box.hi.cwiseMax(yb[i]).cwiseMax(yp[i]);
    }
    est.y_box = yb_box;

    double running = 0.0;
    std::vector<std::size_t> best_union_cells;
    std::vector<std::size_t> best_counts;
    for (std::size_t k = 0; k <= opt.y_partition_res; ++k) {
      const auto counts = detail::level_counts(k, mo);
      std::size_t cells = 1;
      for (auto c : counts) cells *= c;
      std::vector<std::size_t> cb(n), cp(n);
      for (std::size_t i = 0; i < n; ++i) {
        cb[i] = detail::cell_index(yb[i], yb_box, counts);
        cp[i] = detail::cell_index(yp[i], yb_box, counts);
      }
      // acc[j * cells + c] = sum_i f_j(x'p) 1{yp in c} - f_j(x'b) 1{yb in c}
      std::vector<double> acc(nf * cells, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        const double* pb = &fb[i * nf];
        const double* pp = &fp[i * nf];
        double* ab = &acc[cb[i]];
        double* ap = &acc[cp[i]];
        for (std::size_t j = 0; j < nf; ++j) {
          ap[j * cells] += pp[j];
          ab[j * cells] -= pb[j];
        }
      }
      for (std::size_t j = 0; j < nf; ++j) {
        double pos = 0.0, neg = 0.0;
        for (std::size_t c = 0; c < cells; ++c) {
          const double v = acc[j * cells + c];
          if (v > 0.0) pos += v;
          else neg -= v;
        }
        const double val = std::max(pos, neg) / static_cast<double>(n);
        if (val > est.modulus) {
          est.modulus = val;
          est.best_function = j;
          est.best_level = k;
          best_counts = counts;
          best_union_cells.clear();
          for (std::size_t c = 0; c < cells; ++c) {
            const double v = acc[j * cells + c];
            if (pos >= neg ? v > 0.0 : v < 0.0) best_union_cells.push_back(c);
          }
        }
      }
      running = std::max(running, est.modulus);
      est.by_level.push_back(running);
    }
    if (!best_counts.empty()) {
      std::vector<char> in_union(std::accumulate(best_counts.begin(), best_counts.end(), std::size_t{1},
                                                 std::multiplies<>()),
                                 0);
      for (auto c : best_union_cells) in_union[c] = 1;
      double s = 0.0, q = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double v = (in_union[detail::cell_index(yp[i], yb_box, best_counts)] ? fp[i * nf + est.best_function] : 0.0) -
                         (in_union[detail::cell_index(yb[i], yb_box, best_counts)] ? fb[i * nf + est.best_function] : 0.0);
        s += v;
        q += v * v;
      }
      const double mean = s / static_cast<double>(n);
      est.band = std::sqrt(std::max(0.0, q / static_cast<double>(n) - mean * mean) / static_cast<double>(n));
    }
    rep.estimates.push_back(std::move(est));
  }
  // Verdict from the smallest radius.
  const auto* smallest = &rep.estimates.front();
  for (const auto& e : rep.estimates)
    if (e.radius < smallest->radius) smallest = &e;
  rep.verdict = continuity_verdict(smallest->modulus, smallest->band, opt.discontinuity_floor);
  return rep;
}

// ---------------------------------------------------------------------------
// Set convergence

/// Compact set K in the noise space: a box or a closed ball.
struct CompactSet {
  enum class Kind { Box, Ball } kind = Kind::Box;
  Box box;
  Vec center;
  double radius = 0.0;

  static CompactSet make_box(Box b) {
    CompactSet k;
    k.kind = Kind::Box;
    k.box = std::move(b);
    return k;
  }
  static CompactSet make_ball(Vec c, double r) {
    CompactSet k;
    k.kind = Kind::Ball;
    k.center = std::move(c);
    k.radius = r;
    k.box = Box(k.center.array() - r, k.center.array() + r);
    return k;
  }
  Eigen::Index dim() const { return box.dim(); }
  bool contains(const Vec& w, double slack = 1e-12) const {
    if (kind == Kind::Box) return box.contains(w, slack);
    return (w - center).norm() <= radius * (1.0 + slack) + slack;
  }
  /// Points on the boundary; two endpoints in 1D, `count` points in 2D.
  std::vector<Vec> boundary(std::size_t count) const {
    std::vector<Vec> out;
    if (dim() == 1) {
      out.push_back(box.lo);
      out.push_back(box.hi);
      return out;
    }
    if (kind == Kind::Ball) {
      for (std::size_t i = 0; i < count; ++i) {
        const double t = 2.0 * M_PI * static_cast<double>(i) / static_cast<double>(count);
        out.push_back(center + radius * Vec((Vec(2) << std::cos(t), std::sin(t)).finished()));
      }
      return out;
    }
    const double w = box.hi[0] - box.lo[0], h = box.hi[1] - box.lo[1];
    const double per = 2.0 * (w + h);
    for (std::size_t i = 0; i < count; ++i) {
      double s = per * static_cast<double>(i) / static_cast<double>(count);
      Vec p(2);
      if (s < w) p << box.lo[0] + s, box.lo[1];
      else if ((s -= w) < h) p << box.hi[0], box.lo[1] + s;
      else if ((s -= h) < w) p << box.hi[0] - s, box.hi[1];
      else p << box.lo[0], box.hi[1] - (s - w);
      out.push_back(std::move(p));
    }
    return out;
  }
};

inline json to_json(const CompactSet& k) {
  if (k.kind == CompactSet::Kind::Box) return {{"kind", "box"}, {"box", to_json(k.box)}};
  return {{"kind", "ball"}, {"center", to_json_vec(k.center)}, {"radius", k.radius}};
}

inline CompactSet compact_set_from_json(const json& j) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "box") return CompactSet::make_box(box_from_json(j.at("box")));
  if (kind == "ball") return CompactSet::make_ball(vec_from_json(j.at("center")), j.at("radius").get<double>());
  throw InvalidArgument("unknown compact set kind '" + kind + "'");
}

struct SetConvergenceOptions {
  /// Boundary samples per image; 0 means 16 * resolution.
  std::size_t boundary_samples = 0;
  double max_failure_fraction = 0.01;
  double pad = 0.02;
  NewtonOptions newton{};
};

struct SetConvergenceReport {
  double hausdorff_distance = 0.0;
  double symdiff_measure = 0.0;
  double volume_base = 0.0;
  double volume_moved = 0.0;
  std::size_t resolution = 0;
  double cell_volume = 0.0;
  std::size_t inversion_failures = 0;
  double failure_fraction = 0.0;
  Box raster_box;
  std::string verdict = "ok";
};

inline json to_json(const SetConvergenceReport& r) {
  return {{"hausdorff_distance", r.hausdorff_distance},
          {"symdiff_measure", r.symdiff_measure},
          {"volume_base", r.volume_base},
          {"volume_moved", r.volume_moved},
          {"resolution", r.resolution},
          {"cell_volume", r.cell_volume},
          {"inversion_failures", r.inversion_failures},
          {"failure_fraction", r.failure_fraction},
          {"raster_box", to_json(r.raster_box)},
          {"verdict", r.verdict}};
}

namespace detail {

/// Nearest-point queries on a 2D cloud through uniform buckets.
class PointCloud2 {
 public:
  explicit PointCloud2(const std::vector<Vec>& pts) : pts_(pts) {
    if (pts_.empty()) return;
    lo_ = hi_ = pts_[0];
    for (const auto& p : pts_) {
      lo_ = lo_.cwiseMin(p);
      hi_ = hi_.cwiseMax(p);
    }
    g_ = std::max<std::size_t>(1, static_cast<std::size_t>(std::sqrt(static_cast<double>(pts_.size()))));
    cell_ = std::max((hi_ - lo_).maxCoeff() / static_cast<double>(g_), 1e-12);
    gx_ = static_cast<long long>((hi_[0] - lo_[0]) / cell_) + 1;
    gy_ = static_cast<long long>((hi_[1] - lo_[1]) / cell_) + 1;
    buckets_.resize(static_cast<std::size_t>(gx_ * gy_));
    for (std::size_t i = 0; i < pts_.size(); ++i) buckets_[bucket(pts_[i])].push_back(i);
  }

  double nearest(const Vec& q) const {
    if (pts_.empty()) return kInf;
    const long long cx = clampi(static_cast<long long>(std::floor((q[0] - lo_[0]) / cell_)), gx_);
    const long long cy = clampi(static_cast<long long>(std::floor((q[1] - lo_[1]) / cell_)), gy_);
    double best = kInf;
    const long long max_ring = std::max(gx_, gy_) + 1;
    for (long long ring = 0; ring <= max_ring; ++ring) {
      for (long long ix = cx - ring; ix <= cx + ring; ++ix) {
        for (long long iy = cy - ring; iy <= cy + ring; ++iy) {
          if (std::max(std::abs(ix - cx), std::abs(iy - cy)) != ring) continue;
          if (ix < 0 || iy < 0 || ix >= gx_ || iy >= gy_) continue;
          for (auto i : buckets_[static_cast<std::size_t>(ix * gy_ + iy)]) best = std::min(best, (pts_[i] - q).norm());
        }
      }
      // Unscanned buckets are more than `ring` cells away in some axis, also
      // when q lies outside the bucket grid.
      if (best <= static_cast<double>(ring) * cell_)
        break;
    }
    return best;
  }

 private:
  static long long clampi(long long v, long long n) { return std::min(std::max(v, 0LL), n - 1); }
  std::size_t bucket(const Vec& p) const {
    const long long ix = clampi(static_cast<long long>(std::floor((p[0] - lo_[0]) / cell_)), gx_);
    const long long iy = clampi(static_cast<long long>(std::floor((p[1] - lo_[1]) / cell_)), gy_);
    return static_cast<std::size_t>(ix * gy_ + iy);
  }
  std::vector<Vec> pts_;
  Vec lo_, hi_;
  std::size_t g_ = 1;
  double cell_ = 1.0;
  long long gx_ = 1, gy_ = 1;
  std::vector<std::vector<std::size_t>> buckets_;
};

inline double nearest_distance(const std::vector<Vec>& cloud, const PointCloud2* index, const Vec& q) {
  if (index) return index->nearest(q);
  double best = kInf;
  for (const auto& p : cloud) best = std::min(best, (p - q).norm());
  return best;
}

}  // namespace detail

/// Hausdorff distance and Lebesgue measure of the symmetric difference of
/// phi(s2, K) and phi(s2', K) for n <= 2.
///
/// Both images are rasterized on a common grid of `resolution` cells per
/// axis by Newton-inverting every cell centre (warm-started from the
/// previous cell) and testing the preimage against K. The symmetric
/// difference is the XOR cell count times the cell volume. For the
/// Hausdorff distance each image is represented by its member cell centres
/// plus the mapped boundary samples phi(s2, dK); distances from points
/// outside the other image are taken to its mapped boundary.
inline SetConvergenceReport set_convergence_check(const ParamMap& phi, const CompactSet& K, const Vec& s2,
                                                  const Vec& s2_prime, std::size_t resolution,
                                                  const SetConvergenceOptions& opt = {}) {
  const Eigen::Index n = K.dim();
  require(n == 1 || n == 2, "set_convergence_check: only dimensions 1 and 2 are supported");
  require(resolution >= 2, "set_convergence_check: resolution must be >= 2");
  require(K.box.nondegenerate(), "set_convergence_check: K must have nonempty interior");
  const std::size_t nb = opt.boundary_samples ? opt.boundary_samples : 16 * resolution;
  const auto dK = K.boundary(nb);

  std::vector<Vec> bd_a, bd_b;
  for (const auto& w : dK) {
    bd_a.push_back(phi(s2, w));
    bd_b.push_back(phi(s2_prime, w));
    require(bd_a.back().size() == n && bd_b.back().size() == n,
            "set_convergence_check: phi must map K into a space of the same dimension");
  }
  // Raster box: images of K are bounded by the images of dK; a coarse
  // interior grid guards the 1D case and maps that fold.
  Vec lo = bd_a[0], hi = bd_a[0];
  auto grow = [&](const Vec& v) {
    lo = lo.cwiseMin(v);
    hi = hi.cwiseMax(v);
  };
  for (const auto& v : bd_a) grow(v);
  for (const auto& v : bd_b) grow(v);
  const std::size_t coarse = n == 1 ? 257 : 33;
  for_each_multi_index(std::vector<std::size_t>(static_cast<std::size_t>(n), coarse), [&](const std::vector<std::size_t>& idx) {
    Vec w(n);
    for (Eigen::Index k = 0; k < n; ++k)
      w[k] = K.box.lo[k] + (K.box.hi[k] - K.box.lo[k]) * static_cast<double>(idx[static_cast<std::size_t>(k)]) /
                               static_cast<double>(coarse - 1);
    if (!K.contains(w)) return;
    grow(phi(s2, w));
    grow(phi(s2_prime, w));
  });
  const Vec width = (hi - lo).cwiseMax(1e-9);
  SetConvergenceReport rep;
  rep.resolution = resolution;
  rep.raster_box = Box(lo - opt.pad * width, hi + opt.pad * width);
  const Box& rb = rep.raster_box;

  std::vector<std::vector<double>> axes(static_cast<std::size_t>(n));
  for (Eigen::Index k = 0; k < n; ++k) axes[static_cast<std::size_t>(k)] = midpoints(rb.lo[k], rb.hi[k], resolution);
  rep.cell_volume = 1.0;
  for (Eigen::Index k = 0; k < n; ++k) rep.cell_volume *= (rb.hi[k] - rb.lo[k]) / static_cast<double>(resolution);

  const auto kstarts = coarse_starts(K.box, 8);
  const std::size_t rows = n == 1 ? 1 : resolution;
  const std::size_t cols = resolution;
  std::vector<char> in_a(rows * cols, 0), in_b(rows * cols, 0);
  std::vector<std::size_t> fail_rows(rows, 0);

  auto rasterize = [&](const Vec& param, std::vector<char>& member) {
    parallel_for(rows, [&](std::size_t r) {
      std::optional<Vec> warm;
      for (std::size_t c = 0; c < cols; ++c) {
        Vec y(n);
        if (n == 1) y[0] = axes[0][c];
        else y << axes[0][r], axes[1][c];
        std::vector<Vec> starts;
        if (warm) starts.push_back(*warm);
        starts.insert(starts.end(), kstarts.begin(), kstarts.end());
        const auto inv = invert_map(phi, param, y, starts, opt.newton);
        if (!inv.converged) {
          ++fail_rows[r];
          continue;
        }
        warm = inv.omega;
        member[r * cols + c] = K.contains(inv.omega) ? 1 : 0;
      }
    });
  };
  rasterize(s2, in_a);
  rasterize(s2_prime, in_b);
  for (auto f : fail_rows) rep.inversion_failures += f;
  rep.failure_fraction = static_cast<double>(rep.inversion_failures) / static_cast<double>(2 * rows * cols);

  std::size_t xor_count = 0, count_a = 0, count_b = 0;
  for (std::size_t i = 0; i < in_a.size(); ++i) {
    xor_count += in_a[i] != in_b[i];
    count_a += in_a[i];
    count_b += in_b[i];
  }
  rep.symdiff_measure = static_cast<double>(xor_count) * rep.cell_volume;
  rep.volume_base = static_cast<double>(count_a) * rep.cell_volume;
  rep.volume_moved = static_cast<double>(count_b) * rep.cell_volume;

  // Hausdorff.
  std::unique_ptr<detail::PointCloud2> idx_a, idx_b;
  if (n == 2) {
    idx_a = std::make_unique<detail::PointCloud2>(bd_a);
    idx_b = std::make_unique<detail::PointCloud2>(bd_b);
  }
  auto member_exact = [&](const Vec& param, const Vec& y) {
    std::vector<Vec> starts = kstarts;
    const auto inv = invert_map(phi, param, y, starts, opt.newton);
    return inv.converged && K.contains(inv.omega);
  };
  auto cell_center = [&](std::size_t i) {
    Vec y(n);
    if (n == 1) y[0] = axes[0][i];
    else y << axes[0][i / cols], axes[1][i % cols];
    return y;
  };
  // sup over the member cells of one raster of the distance to the other image.
  auto directed = [&](const std::vector<char>& from, const std::vector<char>& to, const std::vector<Vec>& bd_to,
                      const detail::PointCloud2* idx_to) {
    std::vector<double> row_max(rows, 0.0);
    parallel_for(rows, [&](std::size_t r) {
      for (std::size_t c = 0; c < cols; ++c) {
        const std::size_t i = r * cols + c;
        if (!from[i] || to[i]) continue;
        row_max[r] = std::max(row_max[r], detail::nearest_distance(bd_to, idx_to, cell_center(i)));
      }
    });
    return *std::max_element(row_max.begin(), row_max.end());
  };
  auto directed_boundary = [&](const std::vector<Vec>& bd_from, const Vec& param_to, const std::vector<Vec>& bd_to,
                               const detail::PointCloud2* idx_to) {
    std::vector<double> d(bd_from.size(), 0.0);
    parallel_for(bd_from.size(), [&](std::size_t i) {
      if (!member_exact(param_to, bd_from[i])) d[i] = detail::nearest_distance(bd_to, idx_to, bd_from[i]);
    });
    return d.empty() ? 0.0 : *std::max_element(d.begin(), d.end());
  };
  const double ab = std::max(directed(in_a, in_b, bd_b, idx_b.get()), directed_boundary(bd_a, s2_prime, bd_b, idx_b.get()));
  const double ba = std::max(directed(in_b, in_a, bd_a, idx_a.get()), directed_boundary(bd_b, s2, bd_a, idx_a.get()));
  rep.hausdorff_distance = std::max(ab, ba);
  if (rep.failure_fraction > opt.max_failure_fraction) rep.verdict = "inconclusive";
  return rep;
}

}  // namespace beliefmdp
