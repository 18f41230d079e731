#include "beliefmdp/catalog.hpp"
#include "beliefmdp/filter.hpp"

#include <gtest/gtest.h>

#include <map>
#include <sstream>

using namespace beliefmdp;

namespace {
Vec v1(double a) { return Vec::Constant(1, a); }

Mat mat2(double a, double b, double c, double d) { return (Mat(2, 2) << a, b, c, d).finished(); }

StochasticControlModel two_state(const Mat& T, const Mat& Q, Flavor f = Flavor::POMDP) {
  FiniteTables t;
  t.n_states = t.n_actions = t.n_obs = 2;
  t.transition = {T, mat2(0.5, 0.5, 0.5, 0.5)};
  t.observation = {Q, mat2(0.6, 0.4, 0.4, 0.6)};
  return finite_model(t, f, {0.5, 0.5});
}

// The two-state example: identity dynamics, Q(y=0|x=0) = 0.8, Q(y=0|x=1) = 0.4.
StochasticControlModel bayes_example() { return two_state(Mat::Identity(2, 2), mat2(0.8, 0.2, 0.4, 0.6)); }

const std::vector<double>& weights(const Belief& b) { return std::get<FiniteBelief>(b).weights; }

LinearGaussian scalar_lssm(double f1, double xi_var, double g, double eta_var) {
  LinearGaussian l;
  l.F1 = Mat::Constant(1, 1, f1);
  l.F2 = Mat::Constant(1, 1, 1.0);
  l.G = Mat::Constant(1, 1, g);
  l.xi_mean = l.eta_mean = Vec::Zero(1);
  l.xi_cov = Mat::Constant(1, 1, xi_var);
  l.eta_cov = Mat::Constant(1, 1, eta_var);
  return l;
}

// Grid masses of N(mean, var) at the nodes, normalized.
std::vector<double> gaussian_masses(const RectGrid& g, double mean, double var) {
  std::vector<double> w(g.size());
  double s = 0;
  for (std::size_t i = 0; i < g.size(); ++i) s += w[i] = normal_pdf((g.node(i)[0] - mean) / std::sqrt(var));
  for (double& v : w) v /= s;
  return w;
}

// L1 distance between node masses (as a density) and a Gaussian density.
double l1_to_gaussian(const RectGrid& g, const std::vector<double>& masses, double mean, double var) {
  const double h = g.cell_volume(), sd = std::sqrt(var);
  double s = 0;
  for (std::size_t i = 0; i < g.size(); ++i) s += std::abs(masses[i] / h - normal_pdf((g.node(i)[0] - mean) / sd) / sd);
  return s * h;
}
}  // namespace

// --- finite Bayes ----------------------------------------------------------------------

TEST(BayesUpdate, TwoStateArithmetic) {
  const auto m = bayes_example();
  const auto st = bayes_update(m, FiniteBelief::over_indices({0.5, 0.5}), v1(0), v1(0));
  EXPECT_NEAR(weights(st.posterior)[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(weights(st.posterior)[1], 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(st.predictive_likelihood, 0.6, 1e-15);
}

TEST(BayesUpdate, UninformativeObservationGivesPrediction) {
  const Mat T = mat2(0.9, 0.1, 0.2, 0.8);
  const auto m = two_state(T, mat2(0.3, 0.7, 0.3, 0.7));
  const std::vector<double> z = {0.25, 0.75};
  const auto st = bayes_update(m, FiniteBelief::over_indices(z), v1(0), v1(1));
  EXPECT_NEAR(weights(st.posterior)[0], 0.25 * 0.9 + 0.75 * 0.2, 1e-15);
  EXPECT_NEAR(weights(st.posterior)[1], 0.25 * 0.1 + 0.75 * 0.8, 1e-15);
}

TEST(BayesUpdate, CurrentStateFlavorWeighsBeforeMoving) {
  const Mat T = mat2(0.9, 0.1, 0.2, 0.8), Q = mat2(0.8, 0.2, 0.4, 0.6);
  const auto m = two_state(T, Q, Flavor::POMDP1);
  const auto st = bayes_update(m, FiniteBelief::over_indices({0.5, 0.5}), v1(0), v1(0));
  // Weight by Q(y|x) first: (2/3, 1/3), then move.
  EXPECT_NEAR(weights(st.posterior)[0], 2.0 / 3 * 0.9 + 1.0 / 3 * 0.2, 1e-15);
  EXPECT_NEAR(st.predictive_likelihood, 0.6, 1e-15);
}

TEST(BayesUpdate, ImpossibleObservationIsDegenerate) {
  const auto m = two_state(Mat::Identity(2, 2), mat2(1.0, 0.0, 0.4, 0.6));
  try {
    bayes_update(m, FiniteBelief::over_indices({1.0, 0.0}), v1(0), v1(1));
    FAIL() << "expected DegenerateUpdate";
  } catch (const DegenerateUpdate& e) {
    EXPECT_EQ(e.witness().at("prior").dump(), to_json(Belief(FiniteBelief::over_indices({1.0, 0.0}))).dump());
  }
}

TEST(BayesUpdate, TotalProbabilityIdentity) {
  const auto m = catalog_model("finite_tables");
  const auto& t = *m.finite;
  for (double p : {0.0, 0.3, 0.77, 1.0}) {
    const std::vector<double> z = {p, 1 - p};
    for (std::size_t a = 0; a < 2; ++a) {
      const auto pred = predictive_observation(m, FiniteBelief::over_indices(z), index_vec(a), 0, 0).empirical();
      Eigen::RowVector2d mix = Eigen::RowVector2d::Zero();
      for (std::size_t y = 0; y < 2; ++y) {
        if (pred.weights[y] == 0.0) continue;
        const std::vector<double> post = weights(bayes_update(m, FiniteBelief::over_indices(z), index_vec(a), index_vec(y)).posterior);
        mix += pred.weights[y] * Eigen::RowVector2d(post[0], post[1]);
      }
      const Eigen::RowVector2d predicted = Eigen::RowVector2d(z[0], z[1]) * t.transition[a];
      EXPECT_NEAR((mix - predicted).cwiseAbs().maxCoeff(), 0.0, 1e-12);
    }
  }
}

// --- predictive law ----------------------------------------------------------------

TEST(PredictiveObservation, TwoStateExample) {
  const auto e = predictive_observation(bayes_example(), FiniteBelief::over_indices({0.5, 0.5}), v1(0), 0, 0).empirical();
  EXPECT_NEAR(e.weights[0], 0.6, 1e-15);
  EXPECT_NEAR(e.weights[1], 0.4, 1e-15);
}

TEST(PredictiveObservation, LinearInFinitePrior) {
  const auto m = catalog_model("finite_tables");
  const std::vector<double> z1 = {0.9, 0.1}, z2 = {0.2, 0.8};
  const double lam = 0.35;
  const std::vector<double> mix = {lam * z1[0] + (1 - lam) * z2[0], lam * z1[1] + (1 - lam) * z2[1]};
  for (std::size_t a = 0; a < 2; ++a) {
    const auto p1 = predictive_observation(m, FiniteBelief::over_indices(z1), index_vec(a), 0, 0).empirical();
    const auto p2 = predictive_observation(m, FiniteBelief::over_indices(z2), index_vec(a), 0, 0).empirical();
    const auto pm = predictive_observation(m, FiniteBelief::over_indices(mix), index_vec(a), 0, 0).empirical();
    for (std::size_t y = 0; y < 2; ++y) EXPECT_NEAR(pm.weights[y], lam * p1.weights[y] + (1 - lam) * p2.weights[y], 1e-15);
  }
}

TEST(PredictiveObservation, PointMassBeliefIsObservationOfTransition) {
  const auto m = catalog_model("additive_nonlinear");
  const Vec x = v1(0.3), a = v1(-0.1);
  const auto pred = predictive_observation(m, FiniteBelief::point_mass(x), a, 5000, 19).empirical();
  const auto joint = joint_kernel(m, x, a, 5000, 19).empirical();
  for (std::size_t i = 0; i < joint.points.size(); ++i) ASSERT_EQ(pred.points[i][0], joint.points[i][1]);
}

TEST(PredictiveObservation, LssmMean) {
  const auto m = catalog_model("lssm", {{"p0_mean", 1.0}});
  const long long n = 100000;
  const auto e = predictive_observation(m, m.p0, v1(0.5), n, 23).empirical();
  // y' = G(F1 x + F2 a + xi) + eta; Var = 0.81 + 1 + 0.25.
  EXPECT_NEAR(kernel_mean(e)[0], 0.9 * 1.0 + 0.5, 3 * std::sqrt(2.06 / static_cast<double>(n)));
}

// --- filter kernel q ----------------------------------------------------------------------

TEST(FilterKernelSample, UninformativeObservationGivesPredictionEverywhere) {
  const Mat T = mat2(0.9, 0.1, 0.2, 0.8);
  const auto m = two_state(T, mat2(0.5, 0.5, 0.5, 0.5));
  const auto s = filter_kernel_sample(m, FiniteBelief::over_indices({0.4, 0.6}), v1(0), 200, 3);
  ASSERT_EQ(s.beliefs.size(), 200u);
  for (const auto& b : s.beliefs) EXPECT_NEAR(weights(b)[0], 0.4 * 0.9 + 0.6 * 0.2, 1e-15);
}

TEST(FilterKernelSample, TwoStateFrequencies) {
  const long long n = 20000;
  const auto s = filter_kernel_sample(bayes_example(), FiniteBelief::over_indices({0.5, 0.5}), v1(0), n, 5);
  std::map<double, long long> counts;
  for (const auto& b : s.beliefs) ++counts[weights(b)[0]];
  ASSERT_EQ(counts.size(), 2u);
  const double f_hi = static_cast<double>(counts.rbegin()->second) / static_cast<double>(n);
  EXPECT_NEAR(counts.rbegin()->first, 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(f_hi, 0.6, 3 * std::sqrt(0.24 / static_cast<double>(n)));
}

TEST(FilterKernelSample, LssmPosteriorCovarianceIsObservationFree) {
  const auto m = catalog_model("lssm");
  const auto s = filter_kernel_sample(m, m.p0, v1(0.2), 300, 7);
  ASSERT_EQ(s.beliefs.size(), 300u);
  const Mat c0 = std::get<GaussianBelief>(s.beliefs.front()).cov;
  double worst = 0;
  for (const auto& b : s.beliefs) worst = std::max(worst, (std::get<GaussianBelief>(b).cov - c0).cwiseAbs().maxCoeff());
  EXPECT_LT(worst, 1e-10);
}

TEST(FilterKernelSample, DeterministicPerSeed) {
  const auto m = catalog_model("finite_tables");
  const auto a = filter_kernel_sample(m, m.p0, v1(1), 100, 9);
  const auto b = filter_kernel_sample(m, m.p0, v1(1), 100, 9);
  EXPECT_EQ(a.observations, b.observations);
}

// --- Kalman -------------------------------------------------------------------------

TEST(Kalman, ConjugateExample) {
  const auto r = kalman_step(scalar_lssm(1, 0, 1, 1), v1(0), Mat::Identity(1, 1), v1(0), v1(0));
  EXPECT_NEAR(r.mean[0], 0.0, 1e-15);
  EXPECT_NEAR(r.cov(0, 0), 0.5, 1e-15);
  EXPECT_NEAR(r.predictive_density, 1 / std::sqrt(4 * M_PI), 1e-15);
}

TEST(Kalman, PerfectObservationCollapsesToObservation) {
  const auto r = kalman_step(scalar_lssm(1, 0, 1, 0), v1(0), Mat::Identity(1, 1), v1(0), v1(1.7));
  EXPECT_NEAR(r.mean[0], 1.7, 1e-12);
  EXPECT_LE(std::abs(r.cov(0, 0)), 1e-12);
}

TEST(Kalman, NoDynamicsNoInformationKeepsPrior) {
  const auto r = kalman_step(scalar_lssm(1, 0, 0, 1), v1(0.4), Mat::Constant(1, 1, 2.0), v1(0), v1(5.0));
  EXPECT_NEAR(r.mean[0], 0.4, 1e-15);
  EXPECT_NEAR(r.cov(0, 0), 2.0, 1e-15);
}

TEST(Kalman, SingularInnovationIsAnError) {
  EXPECT_THROW(kalman_step(scalar_lssm(1, 0, 0, 0), v1(0), Mat::Identity(1, 1), v1(0), v1(0)), NumericFailure);
}

TEST(Kalman, MatchesGaussianBayesUpdateAndStaysSymmetric) {
  Mat F1(2, 2), cov(2, 2);
  F1 << 0.9, 0.2, -0.1, 0.7;
  cov << 1.0, 0.3, 0.3, 0.5;
  const auto m = catalog_model("lssm", {{"d", 2}, {"l", 1}, {"F1", to_json_mat(F1)}, {"F2", {{1.0}, {0.5}}}});
  const GaussianBelief z{Vec::Zero(2), cov};
  const auto st = bayes_update(m, z, v1(0.3), v1(0.8));
  const auto k = kalman_step(*m.linear, z.mean, z.cov, v1(0.3), v1(0.8));
  const auto& post = std::get<GaussianBelief>(st.posterior);
  EXPECT_EQ(post.mean, k.mean);
  EXPECT_EQ(post.cov, k.cov);
  EXPECT_EQ(k.cov, k.cov.transpose());
  EXPECT_GE(min_eigenvalue(k.cov), 0.0);
}

// --- grid oracle and particles ----------------------------------------------------------

TEST(GridOracle, MatchesKalmanOnLssm) {
  const auto m = catalog_model("lssm");
  const RectGrid g = RectGrid::uniform(Box(v1(-7), v1(7)), 401);
  const auto post = grid_bayes_oracle(m, g, gaussian_masses(g, 0.0, 1.0), v1(0.5), v1(1.2));
  const auto k = kalman_step(*m.linear, v1(0), Mat::Identity(1, 1), v1(0.5), v1(1.2));
  EXPECT_LE(l1_to_gaussian(g, post.weights, k.mean[0], k.cov(0, 0)), 0.02);
}

TEST(GridOracle, UninformativeObservationGivesPrediction) {
  const auto m = catalog_model("lssm", {{"G", 0.0}});
  const RectGrid g = RectGrid::uniform(Box(v1(-7), v1(7)), 201);
  const auto post = grid_bayes_oracle(m, g, gaussian_masses(g, 0.0, 1.0), v1(0.5), v1(3.0));
  // Predicted law N(0.5, 0.81 + 1).
  EXPECT_LE(l1_to_gaussian(g, post.weights, 0.5, 1.81), 0.01);
}

TEST(GridOracle, ErrorShrinksAlongResolutionLadder) {
  const auto m = catalog_model("lssm");
  const auto k = kalman_step(*m.linear, v1(0), Mat::Identity(1, 1), v1(0), v1(-0.6));
  double prev = kInf;
  for (std::size_t n : {21, 41, 81}) {
    const RectGrid g = RectGrid::uniform(Box(v1(-7), v1(7)), n);
    const auto post = grid_bayes_oracle(m, g, gaussian_masses(g, 0.0, 1.0), v1(0), v1(-0.6));
    const double err = l1_to_gaussian(g, post.weights, k.mean[0], k.cov(0, 0));
    EXPECT_LT(err, prev) << n;
    prev = err;
  }
}

TEST(ParticleFilter, MultiplicativeModelAgainstGridOracle) {
  const auto m = catalog_model("multiplicative_nonlinear");
  const Vec a = v1(0), y = v1(3.0);
  const RectGrid g = RectGrid::uniform(Box(v1(-4), v1(8)), 401);
  const auto oracle = grid_bayes_oracle(m, g, gaussian_masses(g, 0.0, 1.0), a, y);

  const std::size_t n = 100000;
  ParticleBelief z;
  z.points = sample_noise(NoiseDistribution::gaussian(v1(0), Mat::Identity(1, 1)), 29, static_cast<long long>(n));
  z.weights.assign(n, 1.0 / static_cast<double>(n));
  FilterOptions fo;
  fo.seed = 31;
  const auto st = bayes_update(m, z, a, y, fo);
  const auto& post = std::get<ParticleBelief>(st.posterior);
  EXPECT_TRUE(st.metadata.contains("ess"));

  const auto hist = histogram_density(EmpiricalKernel{post.points, post.weights}, g);
  double l1 = 0;
  for (std::size_t i = 0; i < g.size(); ++i) l1 += std::abs(hist.values[i] - oracle.weights[i] / g.cell_volume());
  EXPECT_LE(l1 * g.cell_volume(), 0.05);
}

TEST(ParticleFilter, AllZeroWeightsIsDegenerate) {
  StochasticControlModel m = catalog_model("additive_nonlinear");
  m.nu = NoiseDistribution::uniform(v1(-0.1), v1(0.1));
  m.mu = NoiseDistribution::uniform(v1(-0.1), v1(0.1));
  ParticleBelief z{{v1(0), v1(0.01)}, {0.5, 0.5}, 0};
  EXPECT_THROW(bayes_update(m, z, v1(0), v1(5.0)), DegenerateUpdate);
}

TEST(ParticleFilter, ResamplesBelowHalfEss) {
  const auto m = catalog_model("additive_nonlinear");
  ParticleBelief z;
  z.points = sample_noise(NoiseDistribution::gaussian(v1(0), 4 * Mat::Identity(1, 1)), 1, 2000);
  z.weights.assign(2000, 1.0 / 2000);
  const auto st = bayes_update(m, z, v1(0), v1(2.5));
  EXPECT_LT(st.metadata.at("ess").get<double>(), 1000.0);
  EXPECT_TRUE(st.metadata.at("resampled").get<bool>());
  for (double w : std::get<ParticleBelief>(st.posterior).weights) EXPECT_DOUBLE_EQ(w, 1.0 / 2000);
}

// --- trajectories ------------------------------------------------------------------------

TEST(Trajectory, HorizonZeroWritesHeaderOnly) {
  const auto m = catalog_model("lssm");
  ActionRule zero = [](std::size_t, const Belief&) { return v1(0); };
  const auto rows = simulate_trajectory(m, zero, 0, 1);
  EXPECT_TRUE(rows.empty());
  std::ostringstream os;
  write_trajectory_csv(os, rows, 1, 1, 1);
  EXPECT_EQ(os.str(), "t,x0,a0,y0,mean0,cov00,entropy,support_size\n");
}

TEST(Trajectory, SeededRolloutIsReproducible) {
  const auto m = catalog_model("finite_tables");
  ActionRule alt = [](std::size_t t, const Belief&) { return index_vec(t % 2); };
  std::ostringstream a, b;
  write_trajectory_csv(a, simulate_trajectory(m, alt, 25, 4), 1, 1, 1);
  write_trajectory_csv(b, simulate_trajectory(m, alt, 25, 4), 1, 1, 1);
  EXPECT_EQ(a.str(), b.str());
}
