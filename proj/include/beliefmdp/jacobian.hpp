#pragma once

#include "beliefmdp/core.hpp"

namespace beliefmdp {

/// A parametrized map phi(s2, omega) -> R^n.
using ParamMap = std::function<Vec(const Vec& s2, const Vec& omega)>;

inline constexpr double kFdRelStep = 1e-5;
inline constexpr double kSingularityTol = 1e-8;

/// Central-difference Jacobian D_omega phi(s2, omega), step
/// h_j = 1e-5 (1 + |omega_j|). The step actually taken is the
/// representable difference, which removes one source of rounding.
inline Mat jacobian_fd(const ParamMap& phi, const Vec& s2, const Vec& omega) {
  const Eigen::Index n = omega.size();
  Mat jac;
  Vec plus = omega, minus = omega;
  for (Eigen::Index j = 0; j < n; ++j) {
    const double h = kFdRelStep * (1.0 + std::abs(omega[j]));
    plus[j] = omega[j] + h;
    minus[j] = omega[j] - h;
    const double width = plus[j] - minus[j];
    const Vec col = (phi(s2, plus) - phi(s2, minus)) / width;
    if (j == 0) jac.resize(col.size(), n);
    jac.col(j) = col;
    plus[j] = minus[j] = omega[j];
  }
  return jac;
}

struct InversionResult {
  bool converged = false;
  Vec omega;
  int iterations = 0;      ///< total Newton iterations over all starts tried
  int start_index = -1;    ///< start that converged
  double residual = kInf;  ///< |phi(s2, omega) - target|_inf at the returned omega
};

struct NewtonOptions {
  int max_iterations = 50;
  double step_tol = 1e-10;      ///< convergence tolerance on the omega update
  double residual_tol = 1e-8;   ///< relative to 1 + |target|_inf
  int max_backtracks = 30;
};

/// Damped Newton solve of phi(s2, omega) = target from each start in turn;
/// returns on the first start that converges.
inline InversionResult invert_map(const ParamMap& phi, const Vec& s2, const Vec& target,
                                  const std::vector<Vec>& starts, const NewtonOptions& opt = {}) {
  InversionResult res;
  const double scale = 1.0 + target.cwiseAbs().maxCoeff();
  for (std::size_t s = 0; s < starts.size(); ++s) {
    Vec w = starts[s];
    Vec r = phi(s2, w) - target;
    if (!r.allFinite()) continue;
    double rnorm = r.norm();
    for (int it = 0; it < opt.max_iterations; ++it) {
      ++res.iterations;
      const Mat J = jacobian_fd(phi, s2, w);
      if (!J.allFinite()) break;
      Eigen::PartialPivLU<Mat> lu(J);
      const double det = lu.determinant();
      if (!(std::abs(det) > 1e-300)) break;
      const Vec step = lu.solve(r);
      if (!step.allFinite()) break;
      double lambda = 1.0;
      Vec trial = w - step;
      Vec rt = phi(s2, trial) - target;
      int bt = 0;
      while ((!rt.allFinite() || rt.norm() > rnorm) && bt < opt.max_backtracks) {
        lambda *= 0.5;
        trial = w - lambda * step;
        rt = phi(s2, trial) - target;
        ++bt;
      }
      if (!rt.allFinite()) break;
      const double moved = (lambda * step).cwiseAbs().maxCoeff();
      w = trial;
      r = rt;
      rnorm = r.norm();
      if (moved <= opt.step_tol * (1.0 + w.cwiseAbs().maxCoeff()) ||
          r.cwiseAbs().maxCoeff() <= 1e-14 * scale) {
        break;
      }
    }
    const double rinf = r.allFinite() ? r.cwiseAbs().maxCoeff() : kInf;
    if (rinf <= opt.residual_tol * scale) {
      res.converged = true;
      res.omega = w;
      res.start_index = static_cast<int>(s);
      res.residual = rinf;
      return res;
    }
    if (rinf < res.residual) {
      res.residual = rinf;
      res.omega = w;
    }
  }
  return res;
}

/// `count` starting points spread over `box`: a coarse tensor grid of cell
/// midpoints, thinned evenly to `count` points when it overshoots.
inline std::vector<Vec> coarse_starts(const Box& box, std::size_t count = 8) {
  const auto n = static_cast<std::size_t>(box.dim());
  std::size_t per_axis = 2;
  while (static_cast<double>(per_axis) < std::pow(static_cast<double>(count), 1.0 / static_cast<double>(n)) - 1e-12)
    ++per_axis;
  if (n == 1) per_axis = count;
  std::vector<std::vector<double>> axes(n);
  for (std::size_t k = 0; k < n; ++k)
    axes[k] = midpoints(box.lo[static_cast<Eigen::Index>(k)], box.hi[static_cast<Eigen::Index>(k)], per_axis);
  std::vector<Vec> all;
  for_each_multi_index(std::vector<std::size_t>(n, per_axis), [&](const std::vector<std::size_t>& idx) {
    Vec p(static_cast<Eigen::Index>(n));
    for (std::size_t k = 0; k < n; ++k) p[static_cast<Eigen::Index>(k)] = axes[k][idx[k]];
    all.push_back(std::move(p));
  });
  // Closest-to-center first so well-behaved maps converge on the first try.
  const Vec c = box.center();
  std::stable_sort(all.begin(), all.end(),
                   [&](const Vec& a, const Vec& b) { return (a - c).squaredNorm() < (b - c).squaredNorm(); });
  if (all.size() <= count) return all;
  std::vector<Vec> out;
  const double stride = static_cast<double>(all.size()) / static_cast<double>(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(all[static_cast<std::size_t>(std::floor(i * stride))]);
  return out;
}

}  // namespace beliefmdp
