#pragma once

#include "beliefmdp/core.hpp"

#include <boost/math/special_functions/erf.hpp>

#include <memory>
#include <optional>

namespace beliefmdp {

inline double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI); }
inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }
/// Standard normal quantile, p in (0, 1).
inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw InvalidArgument("normal_quantile: p outside (0,1)", json{{"p", p}});
  return -std::sqrt(2.0) * boost::math::erfc_inv(2.0 * p);
}

/// Coordinate-wise quantile used to truncate unbounded supports for grid
/// diagnostics.
inline constexpr double kDefaultTruncationLevel = 1.0 - 1e-6;

/// A noise law on R^n: seeded sampler, optional Lebesgue density,
/// optional conditional quantile map, optional support box.
///
/// Instances are immutable after construction and cheap to copy.
class NoiseDistribution {
 public:
  using Sampler = std::function<void(Rng&, Vec&)>;
  using Density = std::function<double(const Vec&)>;
  /// Quantile of coordinate j given the already generated prefix x_0..x_{j-1}.
  using ConditionalQuantile = std::function<double(Eigen::Index j, const Vec& prefix, double u)>;

  NoiseDistribution() = default;

  /// Pluggable law; `kind` is reported as "custom".
  NoiseDistribution(Eigen::Index dim, Sampler sampler, Density density = {},
                    ConditionalQuantile quantile = {}, std::optional<Box> support = std::nullopt)
      : kind_("custom"),
        dim_(dim),
        sampler_(std::move(sampler)),
        density_(std::move(density)),
        quantile_(std::move(quantile)),
        support_(std::move(support)) {
    require(dim_ > 0, "noise dimension must be positive");
  }

  static NoiseDistribution point_mass(const Vec& at) {
    NoiseDistribution d;
    d.kind_ = "point_mass";
    d.params_ = {{"at", to_json_vec(at)}};
    d.dim_ = at.size();
    d.sampler_ = [at](Rng&, Vec& out) { out = at; };
    d.quantile_ = [at](Eigen::Index j, const Vec&, double) { return at[j]; };
    d.support_ = Box(at, at);
    return d;
  }

  static NoiseDistribution uniform(const Vec& lo, const Vec& hi) {
    Box box(lo, hi);
    require(box.nondegenerate(), "uniform law needs lo < hi componentwise");
    NoiseDistribution d;
    d.kind_ = "uniform";
    d.params_ = {{"lo", to_json_vec(lo)}, {"hi", to_json_vec(hi)}};
    d.dim_ = lo.size();
    d.sampler_ = [lo, hi](Rng& rng, Vec& out) {
      out.resize(lo.size());
      for (Eigen::Index i = 0; i < lo.size(); ++i) out[i] = lo[i] + (hi[i] - lo[i]) * uniform_open(rng);
    };
    const double inv_vol = 1.0 / box.volume();
    d.density_ = [box, inv_vol](const Vec& x) { return box.contains(x) ? inv_vol : 0.0; };
    d.quantile_ = [lo, hi](Eigen::Index j, const Vec&, double u) { return lo[j] + (hi[j] - lo[j]) * u; };
    d.support_ = box;
    return d;
  }

  /// N(mean, cov). A singular `cov` is allowed; the law then has no
  /// density and no conditional quantile map.
  static NoiseDistribution gaussian(const Vec& mean, const Mat& cov,
                                    double truncation_level = kDefaultTruncationLevel) {
    require(cov.rows() == mean.size() && cov.cols() == mean.size(), "gaussian: covariance shape");
    if (!is_psd(cov)) {
      throw InvalidArgument("gaussian: covariance is not symmetric positive semidefinite",
                            json{{"cov", to_json_mat(cov)}});
    }
    NoiseDistribution d;
    d.kind_ = "gaussian";
    d.params_ = {{"mean", to_json_vec(mean)}, {"cov", to_json_mat(cov)}};
    d.dim_ = mean.size();
    const Mat factor = psd_sqrt_factor(cov);
    d.sampler_ = [mean, factor](Rng& rng, Vec& out) {
      Vec z(mean.size());
      for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = standard_normal(rng);
      out = mean + factor * z;
    };
    Eigen::LLT<Mat> llt(cov);
    const bool definite = llt.info() == Eigen::Success && min_eigenvalue(cov) > 1e-14;
    if (definite) {
      const Mat chol = llt.matrixL();
      const double log_norm = -0.5 * static_cast<double>(mean.size()) * std::log(2.0 * M_PI) -
                              chol.diagonal().array().log().sum();
      d.density_ = [mean, chol, log_norm](const Vec& x) {
        const Vec r = chol.triangularView<Eigen::Lower>().solve(x - mean);
        return std::exp(log_norm - 0.5 * r.squaredNorm());
      };
      // x_j = m_j + sum_{i<j} L_ji z_i + L_jj Phi^{-1}(u), with z recovered
      // from the prefix by forward substitution.
      d.quantile_ = [mean, chol](Eigen::Index j, const Vec& prefix, double u) {
        double acc = mean[j];
        if (j > 0) {
          const Vec z = chol.topLeftCorner(j, j).triangularView<Eigen::Lower>().solve(
              prefix.head(j) - mean.head(j));
          acc += chol.row(j).head(j).dot(z);
        }
        return acc + chol(j, j) * normal_quantile(u);
      };
    }
    const double q = normal_quantile(truncation_level);
    const Vec sd = cov.diagonal().cwiseMax(0.0).cwiseSqrt();
    d.support_ = Box(mean - q * sd, mean + q * sd);
    d.truncated_ = true;
    return d;
  }

  /// Finite mixture; component k chosen with probability weights[k].
  static NoiseDistribution mixture(std::vector<double> weights, std::vector<NoiseDistribution> parts) {
    require(!parts.empty() && weights.size() == parts.size(), "mixture: weights/parts size");
    double total = 0.0;
    for (double w : weights) {
      require(w >= 0.0, "mixture: negative weight");
      total += w;
    }
    require(std::abs(total - 1.0) <= 1e-12, "mixture: weights must sum to 1");
    NoiseDistribution d;
    d.kind_ = "mixture";
    json comps = json::array();
    for (const auto& p : parts) {
      require(p.dim() == parts.front().dim(), "mixture: components of different dimension");
      comps.push_back(p.to_json());
    }
    d.params_ = {{"weights", weights}, {"components", comps}};
    d.dim_ = parts.front().dim();
    auto shared = std::make_shared<const std::vector<NoiseDistribution>>(std::move(parts));
    d.sampler_ = [weights, shared](Rng& rng, Vec& out) {
      const double u = uniform_open(rng);
      double acc = 0.0;
      std::size_t k = 0;
      for (; k + 1 < weights.size(); ++k) {
        acc += weights[k];
        if (u < acc) break;
      }
      (*shared)[k].draw(rng, out);
    };
    bool all_dens = true;
    for (const auto& p : *shared) all_dens = all_dens && p.has_density();
    if (all_dens) {
      d.density_ = [weights, shared](const Vec& x) {
        double acc = 0.0;
        for (std::size_t k = 0; k < weights.size(); ++k) acc += weights[k] * (*shared)[k].density(x);
        return acc;
      };
    }
    Box hull = shared->front().support_.value_or(Box());
    bool all_support = true;
    for (const auto& p : *shared) {
      if (!p.support_) {
        all_support = false;
        break;
      }
      hull.lo = hull.lo.cwiseMin(p.support_->lo);
      hull.hi = hull.hi.cwiseMax(p.support_->hi);
      d.truncated_ = d.truncated_ || p.truncated_;
    }
    if (all_support) d.support_ = hull;
    return d;
  }

  static NoiseDistribution from_json(const json& j) {
    const auto kind = j.at("kind").get<std::string>();
    const json& p = j.contains("params") ? j.at("params") : j;
    if (kind == "point_mass") return point_mass(vec_from_json(p.at("at")));
    if (kind == "uniform") return uniform(vec_from_json(p.at("lo")), vec_from_json(p.at("hi")));
    if (kind == "gaussian") {
      Vec mean = vec_from_json(p.at("mean"));
      Mat cov = mat_from_json(p.at("cov"), true);
      return gaussian(mean, cov);
    }
    if (kind == "mixture") {
      std::vector<NoiseDistribution> parts;
      for (const auto& c : p.at("components")) parts.push_back(from_json(c));
      return mixture(p.at("weights").get<std::vector<double>>(), std::move(parts));
    }
    throw InvalidArgument("unknown noise kind '" + kind + "'");
  }

  json to_json() const {
    json j = {{"kind", kind_}, {"params", params_}};
    if (support_) j["support"] = beliefmdp::to_json(*support_);
    return j;
  }

  const std::string& kind() const { return kind_; }
  Eigen::Index dim() const { return dim_; }
  bool has_density() const { return static_cast<bool>(density_); }
  bool has_quantile() const { return static_cast<bool>(quantile_); }
  const std::optional<Box>& support_hint() const { return support_; }
  /// True when support_hint is a quantile truncation of an unbounded support.
  bool support_truncated() const { return truncated_; }

  double density(const Vec& x) const {
    if (!density_) throw InvalidArgument("noise law '" + kind_ + "' has no Lebesgue density");
    return density_(x);
  }
  double quantile(Eigen::Index j, const Vec& prefix, double u) const {
    if (!quantile_) throw InvalidArgument("noise law '" + kind_ + "' has no conditional quantile map");
    return quantile_(j, prefix, u);
  }

  void draw(Rng& rng, Vec& out) const { sampler_(rng, out); }

  /// `count` iid draws. Blocks of kBlock points use substream
  /// derive_seed(seed, block), so the result depends only on (seed, count).
  std::vector<Vec> sample(std::uint64_t seed, long long count) const {
    if (count < 0) throw InvalidArgument("sample: count must be nonnegative", json{{"count", count}});
    std::vector<Vec> out(static_cast<std::size_t>(count));
    const std::size_t n = out.size();
    const std::size_t blocks = (n + kBlock - 1) / kBlock;
    parallel_for(blocks, [&](std::size_t b) {
      Rng rng = make_rng(derive_seed(seed, b));
      const std::size_t end = std::min(n, (b + 1) * kBlock);
      for (std::size_t i = b * kBlock; i < end; ++i) sampler_(rng, out[i]);
    });
    return out;
  }

  static constexpr std::size_t kBlock = 4096;

 private:
  std::string kind_ = "custom";
  json params_ = json::object();
  Eigen::Index dim_ = 0;
  Sampler sampler_;
  Density density_;
  ConditionalQuantile quantile_;
  std::optional<Box> support_;
  bool truncated_ = false;
};

/// Free-function form of NoiseDistribution::sample.
inline std::vector<Vec> sample_noise(const NoiseDistribution& dist, std::uint64_t seed, long long count) {
  return dist.sample(seed, count);
}

}  // namespace beliefmdp
