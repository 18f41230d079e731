#pragma once

#include "beliefmdp/kernel.hpp"

namespace beliefmdp {

struct FilterStep {
  Belief prior;
  Vec action;
  Vec observation;
  Belief posterior;
  /// Value (finite observations) or density of R'(.|z, a) at the observation.
  double predictive_likelihood = 0.0;
  json metadata = json::object();
};

struct FilterOptions {
  std::uint64_t seed = 0;
  /// Systematic resampling when ESS < threshold * N.
  double resample_threshold = 0.5;
  bool resample = true;
};

// ---------------------------------------------------------------------------
// Kalman recursion

struct KalmanResult {
  Vec mean;
  Mat cov;
  double predictive_density = 0.0;
};

inline double gaussian_density(const Vec& x, const Vec& mean, const Mat& cov) {
  Eigen::LLT<Mat> llt(cov);
  if (llt.info() != Eigen::Success) throw NumericFailure("gaussian_density: covariance not positive definite");
  const Mat L = llt.matrixL();
  const Vec r = L.triangularView<Eigen::Lower>().solve(x - mean);
  const double log_det = 2.0 * L.diagonal().array().log().sum();
  return std::exp(-0.5 * (static_cast<double>(x.size()) * std::log(2.0 * M_PI) + log_det + r.squaredNorm()));
}

/// One predict/update step of the Kalman filter for x' = F1 x + F2 a + xi,
/// y' = G x' + eta. Joseph-form covariance update, symmetrized.
inline KalmanResult kalman_step(const LinearGaussian& lin, const Vec& mean, const Mat& cov, const Vec& a,
                                const Vec& y) {
  require(cov.rows() == mean.size() && cov.cols() == mean.size(), "kalman_step: covariance shape");
  require_dim(mean, lin.F1.cols(), "kalman mean");
  require_dim(a, lin.F2.cols(), "kalman action");
  require_dim(y, lin.G.rows(), "kalman observation");
  const Vec m_pred = lin.F1 * mean + lin.F2 * a + lin.xi_mean;
  const Mat P_pred = lin.F1 * cov * lin.F1.transpose() + lin.xi_cov;
  const Mat S = lin.G * P_pred * lin.G.transpose() + lin.eta_cov;
  Eigen::LDLT<Mat> ldlt(0.5 * (S + S.transpose()));
  const double scale = std::max(1.0, S.cwiseAbs().maxCoeff());
  if (ldlt.info() != Eigen::Success || !(min_eigenvalue(S) > 1e-14 * scale)) {
    throw NumericFailure("kalman_step: innovation covariance numerically singular",
                         json{{"innovation_cov", to_json_mat(S)}});
  }
  const Mat K = ldlt.solve(lin.G * P_pred.transpose()).transpose();
  const Vec innovation = y - (lin.G * m_pred + lin.eta_mean);
  KalmanResult out;
  out.mean = m_pred + K * innovation;
  const Mat IKG = Mat::Identity(mean.size(), mean.size()) - K * lin.G;
  Mat P = IKG * P_pred * IKG.transpose() + K * lin.eta_cov * K.transpose();
  out.cov = 0.5 * (P + P.transpose());
  out.predictive_density = gaussian_density(y, lin.G * m_pred + lin.eta_mean, S);
  return out;
}

// ---------------------------------------------------------------------------
// Observation densities

/// Density (or probability, for finite tables) of y under the observation
/// kernel at (x, a, x'): Q(y|a, x') for POMDP, Q1(y|x, a) for POMDP1.
inline double observation_likelihood(const StochasticControlModel& m, const Vec& x, const Vec& a, const Vec& x_next,
                                     const Vec& y, const ChangeOfVariablesOptions& opt = {}) {
  if (m.finite) {
    const auto& t = *m.finite;
    const auto as = as_index(a, t.n_actions, "action");
    const auto ys = as_index(y, t.n_obs, "observation");
    const auto xs = m.flavor == Flavor::POMDP ? as_index(x_next, t.n_states, "state") : as_index(x, t.n_states, "state");
    return t.observation[as](static_cast<Eigen::Index>(xs), static_cast<Eigen::Index>(ys));
  }
  if (m.linear && m.flavor == Flavor::POMDP) {
    const auto& l = *m.linear;
    return gaussian_density(y, l.G * x_next + l.eta_mean, l.eta_cov);
  }
  ParamMap phi;
  if (m.flavor == Flavor::POMDP) {
    phi = [&m, &a, &x_next](const Vec&, const Vec& eta) { return observe(m, a, x_next, eta); };
  } else {
    phi = [&m, &x, &a](const Vec&, const Vec& eta) { return observe1(m, x, a, eta); };
  }
  return density_via_change_of_variables(phi, m.nu, Vec(), y, opt).value;
}

/// Density of T(.|x, a) at x' by change of variables through F(x, a, .).
inline double transition_density(const StochasticControlModel& m, const Vec& x, const Vec& a, const Vec& x_next,
                                 const ChangeOfVariablesOptions& opt = {}) {
  if (m.finite) {
    const auto& t = *m.finite;
    return t.transition[as_index(a, t.n_actions, "action")](
        static_cast<Eigen::Index>(as_index(x, t.n_states, "state")),
        static_cast<Eigen::Index>(as_index(x_next, t.n_states, "state")));
  }
  ParamMap phi = [&m, &x, &a](const Vec&, const Vec& xi) { return step_state(m, x, a, xi); };
  return density_via_change_of_variables(phi, m.mu, Vec(), x_next, opt).value;
}

// ---------------------------------------------------------------------------
// Bayes operator

namespace detail {

inline FilterStep finite_update(const StochasticControlModel& m, const FiniteBelief& z, const Vec& a, const Vec& y) {
  const auto& t = *m.finite;
  require(z.weights.size() == t.n_states, "bayes_update: belief size differs from the number of states");
  const auto as = as_index(a, t.n_actions, "action");
  const auto ys = as_index(y, t.n_obs, "observation");
  const Eigen::Map<const Eigen::RowVectorXd> prior(z.weights.data(), static_cast<Eigen::Index>(z.weights.size()));
  Eigen::RowVectorXd post;
  if (m.flavor == Flavor::POMDP) {
    post = (prior * t.transition[as]).cwiseProduct(t.observation[as].col(static_cast<Eigen::Index>(ys)).transpose());
  } else {
    const Eigen::RowVectorXd weighted =
        prior.cwiseProduct(t.observation[as].col(static_cast<Eigen::Index>(ys)).transpose());
    post = weighted * t.transition[as];
  }
  const double norm = post.sum();
  if (!(norm > 0.0)) {
    throw DegenerateUpdate("bayes_update: observation has zero probability under the prior",
                           json{{"prior", to_json(Belief(z))}, {"action", as}, {"observation", ys}});
  }
  post /= norm;
  FilterStep st;
  st.prior = z;
  st.action = a;
  st.observation = y;
  st.posterior = FiniteBelief::over_indices(std::vector<double>(post.data(), post.data() + post.size()));
  st.predictive_likelihood = norm;
  return st;
}

inline FilterStep particle_update(const StochasticControlModel& m, const ParticleBelief& z, const Vec& a,
                                  const Vec& y, const FilterOptions& opt) {
  const std::size_t n = z.points.size();
  require(n > 0 && z.weights.size() == n, "bayes_update: malformed particle belief");
  const auto xis = m.mu.sample(opt.seed, static_cast<long long>(n));
  std::vector<Vec> next(n);
  std::vector<double> w(n);
  parallel_for(n, [&](std::size_t i) {
    next[i] = step_state(m, z.points[i], a, xis[i]);
    w[i] = z.weights[i] * observation_likelihood(m, z.points[i], a, next[i], y);
  });
  double norm = 0.0;
  for (double v : w) norm += v;
  if (!(norm > 0.0)) {
    throw DegenerateUpdate("bayes_update: every particle has zero observation density",
                           json{{"n_particles", n}, {"observation", to_json_vec(y)}});
  }
  double sq = 0.0;
  for (double& v : w) {
    v /= norm;
    sq += v * v;
  }
  const double ess = 1.0 / sq;
  FilterStep st;
  st.prior = z;
  st.action = a;
  st.observation = y;
  st.predictive_likelihood = norm;
  st.metadata = {{"ess", ess}, {"resample_threshold", opt.resample_threshold}, {"resampled", false}};
  ParticleBelief post{std::move(next), std::move(w), opt.seed};
  if (opt.resample && ess < opt.resample_threshold * static_cast<double>(n)) {
    // Systematic resampling.
    Rng rng = make_rng(derive_seed(opt.seed, 0x7265ULL));
    const double u0 = uniform_open(rng) / static_cast<double>(n);
    std::vector<Vec> pts(n);
    double cum = post.weights[0];
    std::size_t j = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double u = u0 + static_cast<double>(i) / static_cast<double>(n);
      while (u > cum && j + 1 < n) cum += post.weights[++j];
      pts[i] = post.points[j];
    }
    post.points = std::move(pts);
    post.weights.assign(n, 1.0 / static_cast<double>(n));
    st.metadata["resampled"] = true;
  }
  st.posterior = std::move(post);
  return st;
}

}  // namespace detail

/// H(z, a, y): the posterior after acting with `a` and observing `y`.
///
/// FiniteBelief needs exact tables, GaussianBelief a linear-Gaussian
/// POMDP, ParticleBelief a sampler plus an observation density.
inline FilterStep bayes_update(const StochasticControlModel& m, const Belief& z, const Vec& a, const Vec& y,
                               const FilterOptions& opt = {}) {
  require_dim(a, m.action_dim, "action");
  require_dim(y, m.obs_dim, "observation");
  FilterStep st = std::visit(
      [&](const auto& b) -> FilterStep {
        using T = std::decay_t<decltype(b)>;
        if constexpr (std::is_same_v<T, FiniteBelief>) {
          if (!m.finite) throw InvalidArgument("bayes_update: finite belief requires a model with exact tables");
          return detail::finite_update(m, b, a, y);
        } else if constexpr (std::is_same_v<T, GaussianBelief>) {
          if (!m.linear || m.flavor != Flavor::POMDP)
            throw InvalidArgument("bayes_update: Gaussian belief requires a linear-Gaussian POMDP");
          auto k = kalman_step(*m.linear, b.mean, b.cov, a, y);
          FilterStep s;
          s.prior = b;
          s.action = a;
          s.observation = y;
          s.posterior = GaussianBelief{std::move(k.mean), std::move(k.cov)};
          s.predictive_likelihood = k.predictive_density;
          return s;
        } else {
          return detail::particle_update(m, b, a, y, opt);
        }
      },
      z);
  debug_validate(st.posterior);
  return st;
}

// ---------------------------------------------------------------------------
// Predictive observation law and filter kernel

/// R'(.|z, a). Exact table for finite models (atoms are observation
/// indices); otherwise an empirical cloud of n_samples draws.
inline KernelEstimate predictive_observation(const StochasticControlModel& m, const Belief& z, const Vec& a,
                                             long long n_samples, std::uint64_t seed) {
  require_dim(a, m.action_dim, "action");
  if (m.finite && std::holds_alternative<FiniteBelief>(z)) {
    const auto& t = *m.finite;
    const auto& fb = std::get<FiniteBelief>(z);
    require(fb.weights.size() == t.n_states, "predictive_observation: belief size differs from the number of states");
    const auto as = as_index(a, t.n_actions, "action");
    const Eigen::Map<const Eigen::RowVectorXd> prior(fb.weights.data(), static_cast<Eigen::Index>(fb.weights.size()));
    const Eigen::RowVectorXd probs = m.flavor == Flavor::POMDP ? Eigen::RowVectorXd(prior * t.transition[as] * t.observation[as])
                                                               : Eigen::RowVectorXd(prior * t.observation[as]);
    EmpiricalKernel e;
    for (std::size_t y = 0; y < t.n_obs; ++y) {
      e.points.push_back(index_vec(y));
      e.weights.push_back(probs[static_cast<Eigen::Index>(y)]);
    }
    return {std::move(e), json{{"mode", "exact"}, {"action", to_json_vec(a)}}};
  }
  if (n_samples < 1) throw InvalidArgument("predictive_observation: n_samples must be >= 1");
  const auto xis = m.mu.sample(seed, n_samples);
  const auto etas = m.nu.sample(observation_stream(seed), n_samples);
  Rng rng = make_rng(derive_seed(seed, 0x7a3ULL));
  EmpiricalKernel e;
  e.points.reserve(xis.size());
  for (std::size_t i = 0; i < xis.size(); ++i) {
    const Vec x = sample_belief(z, rng);
    const Vec xn = step_state(m, x, a, xis[i]);
    e.points.push_back(emit_observation(m, x, a, xn, etas[i]));
  }
  e.weights.assign(e.points.size(), 1.0 / static_cast<double>(e.points.size()));
  return {std::move(e), json{{"mode", "empirical"}, {"n_samples", n_samples}, {"seed", seed}}};
}

struct FilterKernelSample {
  std::vector<Belief> beliefs;
  std::vector<Vec> observations;
  std::size_t degenerate = 0;
};

/// Draws from q(.|z, a): y_i ~ R'(.|z, a), z_i = H(z, a, y_i).
inline FilterKernelSample filter_kernel_sample(const StochasticControlModel& m, const Belief& z, const Vec& a,
                                               long long n_draws, std::uint64_t seed, FilterOptions opt = {}) {
  if (n_draws < 0) throw InvalidArgument("filter_kernel_sample: n_draws must be >= 0");
  FilterKernelSample out;
  if (n_draws == 0) return out;
  const auto pred = predictive_observation(m, z, a, n_draws, seed);
  std::vector<Vec> ys;
  if (pred.source.value("mode", "") == "exact") {
    const auto& e = pred.empirical();
    Rng rng = make_rng(derive_seed(seed, 0x9d1ULL));
    for (long long i = 0; i < n_draws; ++i) {
      const double u = uniform_open(rng);
      double acc = 0.0;
      std::size_t k = 0;
      for (; k + 1 < e.points.size(); ++k) {
        acc += e.weights[k];
        if (u < acc) break;
      }
      ys.push_back(e.points[k]);
    }
  } else {
    ys = pred.empirical().points;
  }
  for (std::size_t i = 0; i < ys.size(); ++i) {
    opt.seed = derive_seed(seed, 0x100000ULL + i);
    try {
      out.beliefs.push_back(bayes_update(m, z, a, ys[i], opt).posterior);
      out.observations.push_back(ys[i]);
    } catch (const DegenerateUpdate&) {
      ++out.degenerate;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Brute-force grid oracle

/// Bayes formula integrated on a state grid (dimension <= 2) with
/// transition and observation densities from change of variables.
/// `z` holds masses at the grid nodes.
inline FiniteBelief grid_bayes_oracle(const StochasticControlModel& m, const RectGrid& grid,
                                      const std::vector<double>& z, const Vec& a, const Vec& y,
                                      const ChangeOfVariablesOptions& opt = {}) {
  require(grid.dim() >= 1 && grid.dim() <= 2, "grid_bayes_oracle: state dimension must be 1 or 2");
  require(static_cast<Eigen::Index>(grid.dim()) == m.state_dim, "grid_bayes_oracle: grid dimension differs from state_dim");
  require(z.size() == grid.size(), "grid_bayes_oracle: belief size differs from the grid size");
  require(m.mu.has_density(), "grid_bayes_oracle: state noise has no density");
  const std::size_t n = grid.size();
  std::vector<Vec> nodes(n);
  for (std::size_t i = 0; i < n; ++i) nodes[i] = grid.node(i);
  const double vol = grid.cell_volume();

  std::vector<double> post(n, 0.0);
  if (m.flavor == Flavor::POMDP) {
    std::vector<double> pred(n, 0.0);
    parallel_for(n, [&](std::size_t j) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (z[i] == 0.0) continue;
        acc += z[i] * transition_density(m, nodes[i], a, nodes[j], opt);
      }
      pred[j] = acc * vol;
    });
    parallel_for(n, [&](std::size_t j) {
      post[j] = pred[j] == 0.0 ? 0.0 : pred[j] * observation_likelihood(m, nodes[j], a, nodes[j], y, opt);
    });
  } else {
    std::vector<double> lik(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      lik[i] = z[i] == 0.0 ? 0.0 : z[i] * observation_likelihood(m, nodes[i], a, nodes[i], y, opt);
    parallel_for(n, [&](std::size_t j) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        if (lik[i] != 0.0) acc += lik[i] * transition_density(m, nodes[i], a, nodes[j], opt);
      post[j] = acc * vol;
    });
  }
  double norm = 0.0;
  for (double v : post) norm += v;
  if (!(norm > 0.0)) {
    throw DegenerateUpdate("grid_bayes_oracle: zero normalizer", json{{"observation", to_json_vec(y)}});
  }
  for (double& v : post) v /= norm;
  return FiniteBelief{std::move(nodes), std::move(post)};
}

// ---------------------------------------------------------------------------
// Trajectories

/// One row of a filtering log.
struct TrajectoryRow {
  std::size_t t = 0;
  Vec x;  ///< hidden state (simulation only)
  Vec a;
  Vec y;
  Belief belief;
};

using ActionRule = std::function<Vec(std::size_t t, const Belief& z)>;

/// Picks the belief representation the model supports: finite tables ->
/// FiniteBelief, linear-Gaussian -> GaussianBelief, else particles drawn
/// from p0.
inline Belief initial_belief(const StochasticControlModel& m, std::size_t n_particles, std::uint64_t seed) {
  if (m.finite) return m.p0;
  if (m.linear && std::holds_alternative<GaussianBelief>(m.p0)) return m.p0;
  Rng rng = make_rng(derive_seed(seed, 0x1d17ULL));
  ParticleBelief pb;
  pb.points.reserve(n_particles);
  for (std::size_t i = 0; i < n_particles; ++i) pb.points.push_back(sample_belief(m.p0, rng));
  pb.weights.assign(n_particles, 1.0 / static_cast<double>(n_particles));
  pb.lineage_seed = seed;
  return pb;
}

/// Seeded rollout of the equations with the filter in the loop. Row t
/// holds x_t, the action a_t, the observation y_{t+1} it produced and the
/// belief after the update. Horizon 0 gives no rows.
inline std::vector<TrajectoryRow> simulate_trajectory(const StochasticControlModel& m, const ActionRule& policy,
                                                      std::size_t horizon, std::uint64_t seed,
                                                      std::size_t n_particles = 2000) {
  std::vector<TrajectoryRow> rows;
  Rng rng = make_rng(derive_seed(seed, 0x5101ULL));
  Vec x = sample_belief(m.p0, rng);
  Belief z = initial_belief(m, n_particles, seed);
  for (std::size_t t = 0; t < horizon; ++t) {
    const Vec a = policy(t, z);
    const Vec xi = m.mu.sample(derive_seed(seed, 2 * t + 11), 1).front();
    const Vec eta = m.nu.sample(derive_seed(seed, 2 * t + 12), 1).front();
    const Vec xn = step_state(m, x, a, xi);
    const Vec y = emit_observation(m, x, a, xn, eta);
    FilterOptions fo;
    fo.seed = derive_seed(seed, 0x20000ULL + t);
    z = bayes_update(m, z, a, y, fo).posterior;
    rows.push_back({t, x, a, y, z});
    x = xn;
  }
  return rows;
}

/// Writes t, x*, a*, y*, mean*, cov_ij (upper triangle), entropy,
/// support_size. `with_state` drops the x columns when false.
inline void write_trajectory_csv(std::ostream& os, const std::vector<TrajectoryRow>& rows, Eigen::Index d,
                                 Eigen::Index l, Eigen::Index mdim, bool with_state = true) {
  os << "t";
  if (with_state)
    for (Eigen::Index k = 0; k < d; ++k) os << ",x" << k;
  for (Eigen::Index k = 0; k < l; ++k) os << ",a" << k;
  for (Eigen::Index k = 0; k < mdim; ++k) os << ",y" << k;
  for (Eigen::Index k = 0; k < d; ++k) os << ",mean" << k;
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = i; j < d; ++j) os << ",cov" << i << j;
  os << ",entropy,support_size\n";
  for (const auto& r : rows) {
    os << r.t;
    if (with_state)
      for (Eigen::Index k = 0; k < d; ++k) os << ',' << format_number(r.x[k]);
    for (Eigen::Index k = 0; k < l; ++k) os << ',' << format_number(r.a[k]);
    for (Eigen::Index k = 0; k < mdim; ++k) os << ',' << format_number(r.y[k]);
    const Vec mean = belief_mean(r.belief);
    const Mat cov = belief_cov(r.belief);
    for (Eigen::Index k = 0; k < d; ++k) os << ',' << format_number(mean[k]);
    for (Eigen::Index i = 0; i < d; ++i)
      for (Eigen::Index j = i; j < d; ++j) os << ',' << format_number(cov(i, j));
    os << ',' << format_number(belief_entropy(r.belief)) << ',' << belief_support_size(r.belief) << '\n';
  }
}

}  // namespace beliefmdp
