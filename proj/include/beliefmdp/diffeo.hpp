#pragma once

#include "beliefmdp/jacobian.hpp"

namespace beliefmdp {

enum class Verdict { Pass, Fail, Inconclusive };

inline const char* to_string(Verdict v) {
  switch (v) {
    case Verdict::Pass: return "pass";
    case Verdict::Fail: return "fail";
    default: return "inconclusive";
  }
}

struct DiffeoTolerances {
  double singularity_tol = kSingularityTol;
  double collision_tol = 1e-9;
  double min_separation = 1e-3;
  /// Random pairs per parameter node; 0 means grid_res^2.
  std::size_t pairs_per_node = 0;
  /// Jump left after bisection, relative to 1 + |phi|, that counts as a
  /// discontinuity.
  double continuity_tol = 1e-6;
  double jacobian_continuity_tol = 1e-4;
  int bisections = 40;
  int jacobian_bisections = 24;
  /// Grid budget; above it the grid is coarsened and the verdict can at best
  /// be inconclusive.
  std::size_t max_points = 400000;
  std::uint64_t seed = 0x5eed;
  std::size_t max_witnesses = 16;
};

struct DiffeoReport {
  std::size_t grid_points_checked = 0;
  double min_abs_jacobian_det = kInf;
  std::size_t injectivity_collisions = 0;
  std::size_t injectivity_pairs_checked = 0;
  std::size_t continuity_violations = 0;
  std::size_t evaluation_failures = 0;
  bool full_coverage = true;
  Verdict verdict = Verdict::Inconclusive;
  json witnesses = json::array();
  std::string note =
      "conditions are certified only on the probed parameter and noise boxes, not on the whole space";
};

inline json to_json(const DiffeoReport& r) {
  return {{"grid_points_checked", r.grid_points_checked},
          {"min_abs_jacobian_det", r.min_abs_jacobian_det},
          {"injectivity_collisions", r.injectivity_collisions},
          {"injectivity_pairs_checked", r.injectivity_pairs_checked},
          {"continuity_violations", r.continuity_violations},
          {"evaluation_failures", r.evaluation_failures},
          {"full_coverage", r.full_coverage},
          {"verdict", to_string(r.verdict)},
          {"witnesses", r.witnesses},
          {"note", r.note}};
}

namespace detail {

inline double jump_after_bisection(const std::function<Vec(double)>& f, int steps) {
  double lo = 0.0, hi = 1.0;
  Vec flo = f(lo), fhi = f(hi);
  double jump = (fhi - flo).cwiseAbs().maxCoeff();
  for (int k = 0; k < steps && jump > 0.0; ++k) {
    const double mid = 0.5 * (lo + hi);
    const Vec fm = f(mid);
    const double left = (fm - flo).cwiseAbs().maxCoeff();
    const double right = (fhi - fm).cwiseAbs().maxCoeff();
    if (!(left <= right)) {  // NaN lands on the left half
      hi = mid;
      fhi = fm;
      jump = left;
    } else {
      lo = mid;
      flo = fm;
      jump = right;
    }
  }
  return jump;
}

inline Vec flatten(const Mat& m) { return Eigen::Map<const Vec>(m.data(), m.size()); }

}  // namespace detail

/// Numerical probe of the Diffeomorphic Condition for omega -> phi(s2, omega)
/// over `param_box` x `omega_box`.
///
/// Jacobians are central differences on a grid of grid_res points per axis
/// (closed grid in the parameter, cell midpoints in the open noise box).
/// Joint continuity of phi and of D_omega phi is probed by bisecting every
/// adjacent grid pair toward the larger jump; a jump that survives the
/// bisection is a violation. Injectivity is probed by random pairs per
/// parameter node.
inline DiffeoReport check_diffeomorphic(const ParamMap& phi, const Box& param_box, const Box& omega_box,
                                        std::size_t grid_res, const DiffeoTolerances& tol = {}) {
  if (grid_res < 2) throw InvalidArgument("check_diffeomorphic: grid_res must be >= 2");
  if (!omega_box.nondegenerate()) throw InvalidArgument("check_diffeomorphic: degenerate noise box");
  if (param_box.dim() > 0 && !((param_box.hi.array() >= param_box.lo.array()).all()))
    throw InvalidArgument("check_diffeomorphic: invalid parameter box");

  DiffeoReport rep;
  const auto p = static_cast<std::size_t>(param_box.dim());
  const auto n = static_cast<std::size_t>(omega_box.dim());

  std::size_t res = grid_res;
  while (res > 2 && std::pow(static_cast<double>(res), static_cast<double>(p + n)) > static_cast<double>(tol.max_points))
    --res;
  if (res != grid_res) rep.full_coverage = false;

  std::vector<std::vector<double>> param_axes(p), omega_axes(n);
  for (std::size_t k = 0; k < p; ++k) {
    const auto i = static_cast<Eigen::Index>(k);
    param_axes[k] = param_box.hi[i] > param_box.lo[i] ? linspace(param_box.lo[i], param_box.hi[i], res)
                                                       : std::vector<double>{param_box.lo[i]};
  }
  for (std::size_t k = 0; k < n; ++k) {
    const auto i = static_cast<Eigen::Index>(k);
    omega_axes[k] = midpoints(omega_box.lo[i], omega_box.hi[i], res);
  }
  std::vector<std::size_t> pcounts(p), ocounts(n, res);
  for (std::size_t k = 0; k < p; ++k) pcounts[k] = param_axes[k].size();

  auto add_witness = [&](json w) {
    if (rep.witnesses.size() < tol.max_witnesses) rep.witnesses.push_back(std::move(w));
  };
  auto make_point = [](const std::vector<std::vector<double>>& axes, const std::vector<std::size_t>& idx) {
    Vec v(static_cast<Eigen::Index>(axes.size()));
    for (std::size_t k = 0; k < axes.size(); ++k) v[static_cast<Eigen::Index>(k)] = axes[k][idx[k]];
    return v;
  };
  auto safe_eval = [&](const Vec& s2, const Vec& w, Vec& out) {
    try {
      out = phi(s2, w);
      return out.allFinite();
    } catch (const std::exception&) {
      return false;
    }
  };

  const std::size_t pairs = tol.pairs_per_node ? tol.pairs_per_node : res * res;
  std::size_t node_counter = 0;

  for_each_multi_index(pcounts, [&](const std::vector<std::size_t>& pidx) {
    const Vec s2 = make_point(param_axes, pidx);
    const std::size_t node_id = node_counter++;

    for_each_multi_index(ocounts, [&](const std::vector<std::size_t>& oidx) {
      const Vec w = make_point(omega_axes, oidx);
      ++rep.grid_points_checked;
      Vec value;
      if (!safe_eval(s2, w, value)) {
        ++rep.evaluation_failures;
        add_witness({{"probe", "evaluation"}, {"s2", to_json_vec(s2)}, {"omega", to_json_vec(w)}});
        return;
      }
      if (value.size() != w.size()) {
        ++rep.evaluation_failures;
        add_witness({{"probe", "dimension"}, {"s2", to_json_vec(s2)}, {"omega", to_json_vec(w)}});
        return;
      }
      const Mat J = jacobian_fd(phi, s2, w);
      const double det = J.allFinite() ? std::abs(J.determinant()) : 0.0;
      if (det < rep.min_abs_jacobian_det) rep.min_abs_jacobian_det = det;
      if (!(det > tol.singularity_tol)) {
        add_witness({{"probe", "jacobian"}, {"s2", to_json_vec(s2)}, {"omega", to_json_vec(w)}, {"abs_det", det}});
      }

      // Continuity along each parameter axis and each noise axis toward the
      // next grid node.
      auto probe_edge = [&](const Vec& s2b, const Vec& wb, const char* axis_kind, std::size_t axis) {
        auto along = [&](double t) { return Vec(phi(s2 + t * (s2b - s2), w + t * (wb - w))); };
        const double scale = 1.0 + value.cwiseAbs().maxCoeff();
        const double left = detail::jump_after_bisection(along, tol.bisections);
        bool bad = !(left <= tol.continuity_tol * scale);
        if (!bad) {
          auto jac_along = [&](double t) {
            return detail::flatten(jacobian_fd(phi, s2 + t * (s2b - s2), w + t * (wb - w)));
          };
          const double jscale = 1.0 + J.cwiseAbs().maxCoeff();
          const double jleft = detail::jump_after_bisection(jac_along, tol.jacobian_bisections);
          bad = !(jleft <= tol.jacobian_continuity_tol * jscale);
        }
        if (bad) {
          ++rep.continuity_violations;
          add_witness({{"probe", "continuity"},
                       {"axis_kind", axis_kind},
                       {"axis", axis},
                       {"s2", to_json_vec(s2)},
                       {"omega", to_json_vec(w)}});
        }
      };
      for (std::size_t k = 0; k < p; ++k) {
        if (pidx[k] + 1 < pcounts[k]) {
          Vec s2b = s2;
          s2b[static_cast<Eigen::Index>(k)] = param_axes[k][pidx[k] + 1];
          probe_edge(s2b, w, "param", k);
        }
      }
      for (std::size_t k = 0; k < n; ++k) {
        if (oidx[k] + 1 < res) {
          Vec wb = w;
          wb[static_cast<Eigen::Index>(k)] = omega_axes[k][oidx[k] + 1];
          probe_edge(s2, wb, "omega", k);
        }
      }
    });

    // Injectivity: random well-separated pairs inside the open box.
    Rng rng = make_rng(derive_seed(tol.seed, node_id));
    auto draw = [&]() {
      Vec v(static_cast<Eigen::Index>(n));
      for (std::size_t k = 0; k < n; ++k) {
        const auto i = static_cast<Eigen::Index>(k);
        v[i] = omega_box.lo[i] + (omega_box.hi[i] - omega_box.lo[i]) * uniform_open(rng);
      }
      return v;
    };
    for (std::size_t q = 0; q < pairs; ++q) {
      const Vec a = draw();
      Vec b = draw();
      int tries = 0;
      while ((a - b).norm() < tol.min_separation && tries++ < 100) b = draw();
      if ((a - b).norm() < tol.min_separation) {
        rep.full_coverage = false;
        continue;
      }
      Vec fa, fb;
      if (!safe_eval(s2, a, fa) || !safe_eval(s2, b, fb)) {
        ++rep.evaluation_failures;
        add_witness({{"probe", "evaluation"}, {"s2", to_json_vec(s2)}, {"omega", to_json_vec(a)}});
        continue;
      }
      ++rep.injectivity_pairs_checked;
      if ((fa - fb).norm() < tol.collision_tol) {
        ++rep.injectivity_collisions;
        add_witness({{"probe", "injectivity"},
                     {"s2", to_json_vec(s2)},
                     {"omega", to_json_vec(a)},
                     {"omega_prime", to_json_vec(b)}});
      }
    }
  });

  const bool failed = !(rep.min_abs_jacobian_det > tol.singularity_tol) || rep.injectivity_collisions > 0 ||
                      rep.continuity_violations > 0 || rep.evaluation_failures > 0;
  rep.verdict = failed ? Verdict::Fail : (rep.full_coverage ? Verdict::Pass : Verdict::Inconclusive);
  return rep;
}

}  // namespace beliefmdp
