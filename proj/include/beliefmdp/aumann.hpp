#pragma once

// Representation of exactly known kernels as functions of a uniform noise
// on [0,1]^n, built coordinate by coordinate from conditional quantiles.

#include "beliefmdp/jacobian.hpp"
#include "beliefmdp/noise.hpp"

#include <map>
#include <variant>

namespace beliefmdp {

/// kappa(.|s2) with finitely many atoms (points in R^n with probabilities).
struct FiniteSupportKernel {
  Eigen::Index param_dim = 1;
  Eigen::Index dim = 1;
  std::function<std::vector<std::pair<Vec, double>>(const Vec& s2)> atoms;
};

/// kappa(.|s2) = N(mean(s2), cov(s2)) with positive definite cov(s2).
struct GaussianKernel {
  Eigen::Index param_dim = 1;
  Eigen::Index dim = 1;
  std::function<Vec(const Vec& s2)> mean;
  std::function<Mat(const Vec& s2)> cov;
};

/// A kernel known only through a sampler; no conditional quantiles.
struct OpaqueKernel {
  Eigen::Index param_dim = 1;
  Eigen::Index dim = 1;
};

using ExactKernel = std::variant<FiniteSupportKernel, GaussianKernel, OpaqueKernel>;

/// phi(s2, omega) on [0,1]^n evaluated component by component: component j
/// reads (s2, x_1..x_{j-1}, omega_j) and is nondecreasing in omega_j.
struct AumannMap {
  using Component = std::function<double(const Vec& s2, const Vec& prefix, double u)>;

  Eigen::Index param_dim = 0;
  Eigen::Index noise_dim = 0;
  std::vector<Component> components;

  Vec operator()(const Vec& s2, const Vec& omega) const {
    require_dim(omega, noise_dim, "Aumann noise");
    Vec x = Vec::Zero(noise_dim);
    for (Eigen::Index j = 0; j < noise_dim; ++j) x[j] = components[static_cast<std::size_t>(j)](s2, x.head(j), omega[j]);
    return x;
  }

  ParamMap as_param_map() const {
    return [self = *this](const Vec& s2, const Vec& omega) { return self(s2, omega); };
  }

  /// Uniform law on the open unit cube the map is meant to be fed with.
  NoiseDistribution domain_law() const {
    return NoiseDistribution::uniform(Vec::Zero(noise_dim), Vec::Ones(noise_dim));
  }
};

namespace detail {

inline AumannMap aumann_finite(const FiniteSupportKernel& k) {
  AumannMap m;
  m.param_dim = k.param_dim;
  m.noise_dim = k.dim;
  for (Eigen::Index j = 0; j < k.dim; ++j) {
    m.components.push_back([k, j](const Vec& s2, const Vec& prefix, double u) {
      // Conditional law of coordinate j given the prefix, as sorted atoms.
      std::map<double, double> cond;
      double mass = 0.0;
      for (const auto& [pt, w] : k.atoms(s2)) {
        if (w <= 0.0) continue;
        if (j > 0 && (pt.head(j) - prefix).cwiseAbs().maxCoeff() > 0.0) continue;
        cond[pt[j]] += w;
        mass += w;
      }
      if (cond.empty() || !(mass > 0.0))
        throw NumericFailure("Aumann map: conditional law with no mass", json{{"s2", to_json_vec(s2)}});
      double acc = 0.0;
      for (const auto& [value, w] : cond) {
        acc += w / mass;
        if (u < acc) return value;
      }
      return cond.rbegin()->first;
    });
  }
  return m;
}

inline AumannMap aumann_gaussian(const GaussianKernel& k) {
  AumannMap m;
  m.param_dim = k.param_dim;
  m.noise_dim = k.dim;
  for (Eigen::Index j = 0; j < k.dim; ++j) {
    m.components.push_back([k, j](const Vec& s2, const Vec& prefix, double u) {
      const Vec mean = k.mean(s2);
      const Mat cov = k.cov(s2);
      Eigen::LLT<Mat> llt(cov);
      if (llt.info() != Eigen::Success)
        throw NumericFailure("Aumann map: covariance not positive definite", json{{"s2", to_json_vec(s2)}});
      const Mat L = llt.matrixL();
      double acc = mean[j];
      if (j > 0) {
        const Vec z = L.topLeftCorner(j, j).triangularView<Eigen::Lower>().solve(prefix - mean.head(j));
        acc += L.row(j).head(j).dot(z);
      }
      return acc + L(j, j) * normal_quantile(u);
    });
  }
  return m;
}

}  // namespace detail

/// Conditional-quantile (triangular) representation of an exactly known
/// kernel. Finite-support and Gaussian families only.
inline AumannMap build_aumann_map(const ExactKernel& kernel) {
  return std::visit(
      [](const auto& k) -> AumannMap {
        using T = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<T, FiniteSupportKernel>) return detail::aumann_finite(k);
        else if constexpr (std::is_same_v<T, GaussianKernel>) return detail::aumann_gaussian(k);
        else throw InvalidArgument("build_aumann_map: unsupported kernel family (only finite-support and Gaussian)");
      },
      kernel);
}

/// The bivariate normal kernel with unit variances and correlation s2 in (-1, 1).
inline GaussianKernel correlated_gaussian_kernel() {
  GaussianKernel k;
  k.param_dim = 1;
  k.dim = 2;
  k.mean = [](const Vec&) { return Vec(Vec::Zero(2)); };
  k.cov = [](const Vec& s2) {
    Mat c(2, 2);
    c << 1.0, s2[0], s2[0], 1.0;
    return c;
  };
  return k;
}

/// Closed form of det D_omega phi for the correlated Gaussian map:
/// sqrt(1 - s^2) / (Phi'(Phi^{-1}(w1)) Phi'(Phi^{-1}(w2))).
inline double correlated_gaussian_jacobian_det(double s2, double w1, double w2) {
  return std::sqrt(1.0 - s2 * s2) / (normal_pdf(normal_quantile(w1)) * normal_pdf(normal_quantile(w2)));
}

}  // namespace beliefmdp
