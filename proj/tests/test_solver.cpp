#include "beliefmdp/catalog.hpp"
#include "beliefmdp/solver.hpp"

#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

using namespace beliefmdp;

namespace {

FiniteTables fixture_tables() {
  std::ifstream in(std::string(BELIEFMDP_FIXTURE_DIR) + "/two_state_pomdp.json");
  return finite_tables_from_json(json::parse(in));
}

StochasticControlModel fixture() { return finite_model(fixture_tables(), Flavor::POMDP, {0.5, 0.5}); }

CostSpec fixture_cost(AssumptionMode mode = AssumptionMode::D, double alpha = 0.9) {
  return table_cost(fixture_tables().cost, mode, alpha);
}

// Independent two-state belief arithmetic. A belief is p = P(x = 0).
struct TwoStateOracle {
  FiniteTables t;
  std::size_t N;

  std::size_t node(double p) const {
    // Nodes are ordered by k0 = 0..N; rounding half up matches largest remainder.
    return static_cast<std::size_t>(std::floor(p * static_cast<double>(N) + 0.5));
  }
  double cbar(double p, std::size_t a) const { return p * t.cost(0, a) + (1 - p) * t.cost(1, a); }

  // (R'(y), posterior P(x'=0)) for each y.
  std::vector<std::pair<double, double>> successors(double p, std::size_t a) const {
    std::vector<std::pair<double, double>> out;
    const Mat& T = t.transition[a];
    const Mat& Q = t.observation[a];
    const double q0 = p * T(0, 0) + (1 - p) * T(1, 0);
    const double q1 = p * T(0, 1) + (1 - p) * T(1, 1);
    for (int y = 0; y < 2; ++y) {
      const double u0 = q0 * Q(0, y), u1 = q1 * Q(1, y);
      if (u0 + u1 > 0) out.emplace_back(u0 + u1, u0 / (u0 + u1));
    }
    return out;
  }

  double q(double p, std::size_t a, double alpha, const std::vector<double>& v) const {
    double val = cbar(p, a);
    for (auto [r, post] : successors(p, a)) val += alpha * r * v[node(post)];
    return val;
  }

  // v_T on nodes k0 = 0..N (values indexed by k0).
  std::vector<double> ladder(double alpha, std::size_t T) const {
    std::vector<double> v(N + 1, 0.0), next(N + 1);
    for (std::size_t s = 0; s < T; ++s) {
      for (std::size_t k = 0; k <= N; ++k) {
        const double p = static_cast<double>(k) / static_cast<double>(N);
        next[k] = std::min(q(p, 0, alpha, v), q(p, 1, alpha, v));
      }
      v.swap(next);
    }
    return v;
  }
};

// Solver values reindexed by k0 = number of grid units on state 0.
std::vector<double> by_k0(const SimplexGrid& g, const std::vector<double>& v) {
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < g.size(); ++i) out[static_cast<std::size_t>(g.composition(i)[0])] = v[i];
  return out;
}

double sup_gap(const std::vector<double>& a, const std::vector<double>& b) {
  double g = 0;
  for (std::size_t i = 0; i < a.size(); ++i) g = std::max(g, std::abs(a[i] - b[i]));
  return g;
}

// Finite model with uniform tables and the given cost table.
StochasticControlModel uniform_model(std::size_t n, std::size_t m) {
  FiniteTables t;
  t.n_states = t.n_obs = n;
  t.n_actions = m;
  for (std::size_t a = 0; a < m; ++a) {
    t.transition.push_back(Mat::Constant(n, n, 1.0 / n));
    t.observation.push_back(Mat::Constant(n, n, 1.0 / n));
  }
  return finite_model(t, Flavor::POMDP, std::vector<double>(n, 1.0 / n));
}

std::vector<std::size_t> all_actions(std::size_t m) {
  std::vector<std::size_t> a(m);
  for (std::size_t i = 0; i < m; ++i) a[i] = i;
  return a;
}

// Three stock levels, orders of 0..2 units, demand 0/1/2 w.p. .3/.4/.3,
// lost sales and capacity 2, stock read correctly w.p. 0.7.
constexpr std::array<double, 3> kDemand{0.3, 0.4, 0.3};

StochasticControlModel inventory3() {
  FiniteTables t;
  t.n_states = t.n_actions = t.n_obs = 3;
  Mat Q(3, 3);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) Q(i, j) = i == j ? 0.7 : 0.15;
  t.cost = Mat::Zero(3, 3);
  for (int a = 0; a < 3; ++a) {
    Mat T = Mat::Zero(3, 3);
    for (int x = 0; x < 3; ++x) {
      double c = a > 0 ? 0.5 + a : 0.0;
      for (int d = 0; d < 3; ++d) {
        const int level = x + a - d;
        T(x, std::clamp(level, 0, 2)) += kDemand[d];
        c += kDemand[d] * (level > 0 ? 0.5 * level : -3.0 * level);
      }
      t.cost(x, a) = c;
    }
    t.transition.push_back(T);
    t.observation.push_back(Q);
  }
  return finite_model(t, Flavor::POMDP, {1.0 / 3, 1.0 / 3, 1.0 / 3});
}

// Exact finite-horizon value without projection: enumerates every
// observation history.
double exact_value(const FiniteTables& t, const std::vector<double>& z, std::size_t T, std::size_t* first = nullptr,
                   double* margin = nullptr) {
  if (T == 0) return 0.0;
  const std::size_t n = t.n_states;
  std::vector<double> q(t.n_actions);
  for (std::size_t a = 0; a < t.n_actions; ++a) {
    double val = 0;
    for (std::size_t x = 0; x < n; ++x) val += z[x] * t.cost(x, a);
    for (std::size_t y = 0; y < t.n_obs; ++y) {
      std::vector<double> post(n, 0.0);
      double r = 0;
      for (std::size_t x2 = 0; x2 < n; ++x2) {
        for (std::size_t x = 0; x < n; ++x) post[x2] += z[x] * t.transition[a](x, x2);
        post[x2] *= t.observation[a](x2, y);
        r += post[x2];
      }
      if (r <= 0) continue;
      for (double& w : post) w /= r;
      val += r * exact_value(t, post, T - 1);
    }
    q[a] = val;
  }
  const auto it = std::min_element(q.begin(), q.end());
  if (first) *first = static_cast<std::size_t>(it - q.begin());
  if (margin) {
    double second = kInf;
    for (std::size_t a = 0; a < q.size(); ++a)
      if (a != *first) second = std::min(second, q[a]);
    *margin = second - *it;
  }
  return *it;
}

double mean_stock(const std::vector<double>& z) { return z[1] + 2 * z[2]; }

// Pseudo-random action drawn from (t, belief) so the rule stays a pure function.
ActionRule hashed_uniform_policy(std::size_t n_actions, std::uint64_t salt) {
  return [n_actions, salt](std::size_t t, const Belief& z) {
    std::uint64_t h = derive_seed(salt, t);
    for (double w : std::get<FiniteBelief>(z).weights) {
      std::uint64_t bits;
      std::memcpy(&bits, &w, sizeof bits);
      h = derive_seed(h, bits);
    }
    return index_vec(h % n_actions);
  };
}

ActionRule constant_policy(std::size_t a) {
  return [a](std::size_t, const Belief&) { return index_vec(a); };
}

}  // namespace

// --- lift_cost ---------------------------------------------------------------------------

TEST(LiftCost, PointMassEqualsCost) {
  const auto c = quadratic_cost(Mat::Identity(2, 2), 2.0 * Mat::Identity(1, 1));
  const Vec x = (Vec(2) << 1.0, -2.0).finished();
  const Vec a = Vec::Constant(1, 0.5);
  const auto l = lift_cost(c, FiniteBelief::point_mass(x), a);
  EXPECT_EQ(l.mode, "exact");
  EXPECT_DOUBLE_EQ(l.value, 5.0 + 0.5);
}

TEST(LiftCost, LinearOnFiniteSupport) {
  const auto c = fixture_cost();
  const std::vector<double> z1{0.25, 0.75}, z2{1.0, 0.0};
  const double lam = 0.5;
  for (std::size_t a = 0; a < 2; ++a) {
    const double l1 = lift_cost(c, FiniteBelief::over_indices(z1), index_vec(a)).value;
    const double l2 = lift_cost(c, FiniteBelief::over_indices(z2), index_vec(a)).value;
    const double lm =
        lift_cost(c, FiniteBelief::over_indices({lam * z1[0] + (1 - lam) * z2[0], lam * z1[1] + (1 - lam) * z2[1]}),
                  index_vec(a))
            .value;
    EXPECT_EQ(lm, lam * l1 + (1 - lam) * l2);
  }
}

TEST(LiftCost, NeverEvaluatesOffSupport) {
  CostSpec c = fixture_cost();
  c.c = [](const Vec& x, const Vec&) {
    if (x[0] == 1.0) throw std::logic_error("evaluated off support");
    return 2.0;
  };
  EXPECT_EQ(lift_cost(c, FiniteBelief::over_indices({1.0, 0.0}), index_vec(0)).value, 2.0);
}

TEST(LiftCost, InfinityPropagates) {
  CostSpec c = fixture_cost();
  c.c = [](const Vec& x, const Vec&) { return x[0] == 1.0 ? kInf : 1.0; };
  EXPECT_EQ(lift_cost(c, FiniteBelief::over_indices({0.5, 0.5}), index_vec(0)).value, kInf);
}

TEST(LiftCost, GaussianQuadraticClosedFormAgainstMonteCarlo) {
  const auto c = quadratic_cost(Mat::Identity(2, 2), Mat::Identity(1, 1));
  const GaussianBelief z{Vec::Zero(2), Mat::Identity(2, 2)};
  const auto l = lift_cost(c, z, Vec::Zero(1));
  EXPECT_EQ(l.mode, "closed_form");
  EXPECT_DOUBLE_EQ(l.value, 2.0);

  std::mt19937_64 gen(11);
  std::normal_distribution<double> nd;
  const int n = 1000000;
  double s = 0, q = 0;
  for (int i = 0; i < n; ++i) {
    const double u = nd(gen), v = nd(gen);
    const double r = u * u + v * v;
    s += r;
    q += r * r;
  }
  const double mean = s / n, sd = std::sqrt(q / n - mean * mean);
  EXPECT_NEAR(mean, l.value, 3 * sd / std::sqrt(n));

  // The library's own Monte Carlo path for a non-quadratic family agrees too.
  CostSpec custom = c;
  custom.family = "custom";
  const auto mc = lift_cost(custom, z, Vec::Zero(1), 200000, 5);
  EXPECT_EQ(mc.mode, "monte_carlo");
  EXPECT_NEAR(mc.value, 2.0, mc.band);
}

TEST(LiftCost, ParticleMeanWithBand) {
  const auto c = quadratic_cost(Mat::Identity(1, 1), Mat::Identity(1, 1));
  ParticleBelief p;
  p.points = {Vec::Constant(1, 1.0), Vec::Constant(1, 3.0)};
  p.weights = {0.5, 0.5};
  const auto l = lift_cost(c, p, Vec::Zero(1));
  EXPECT_EQ(l.mode, "particles");
  EXPECT_DOUBLE_EQ(l.value, 5.0);
  EXPECT_GT(l.band, 0.0);
}

// --- SimplexGrid -----------------------------------------------------------------------

TEST(SimplexGrid, SizeRankAndProjection) {
  const SimplexGrid g(3, 10);
  EXPECT_EQ(g.size(), 66u);  // C(12, 2)
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_EQ(g.project(g.belief(i)), i);
  std::mt19937_64 gen(3);
  std::gamma_distribution<double> gd(1.0);
  for (int r = 0; r < 500; ++r) {
    std::vector<double> z(3);
    double s = 0;
    for (double& w : z) s += w = gd(gen);
    for (double& w : z) w /= s;
    const auto b = g.belief(g.project(z));
    double l1 = 0;
    for (int j = 0; j < 3; ++j) l1 += std::abs(b[j] - z[j]);
    EXPECT_LE(l1, g.projection_error_bound());
  }
}

// --- bellman_backup ----------------------------------------------------------------------

TEST(BellmanBackup, ZeroCostGivesZeroAndAllActions) {
  const auto m = uniform_model(2, 3);
  const auto c = table_cost(Mat::Zero(2, 3), AssumptionMode::P, 0.9);
  const SimplexGrid g(2, 10);
  const auto r = bellman_backup(m, c, 0.9, std::vector<double>(g.size(), 0.0), g, {0.3, 0.7}, all_actions(3));
  EXPECT_EQ(r.value, 0.0);
  EXPECT_EQ(r.argmin, all_actions(3));
}

TEST(BellmanBackup, MyopicIsMinimumLiftedCost) {
  const auto m = fixture();
  const auto c = fixture_cost(AssumptionMode::D, 0.0);
  const SimplexGrid g(2, 20);
  std::vector<double> junk(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) junk[i] = 100.0 + static_cast<double>(i);
  for (double p : {0.0, 0.1, 0.25, 0.5, 0.9, 1.0}) {
    const auto r = bellman_backup(m, c, 0.0, junk, g, {p, 1 - p}, all_actions(2));
    double best = kInf;
    for (std::size_t a = 0; a < 2; ++a)
      best = std::min(best, lift_cost(c, FiniteBelief::over_indices({p, 1 - p}), index_vec(a)).value);
    EXPECT_DOUBLE_EQ(r.value, best);
  }
}

TEST(BellmanBackup, FixtureHorizonOneMatchesEnumeration) {
  const auto m = fixture();
  const auto c = fixture_cost();
  const std::size_t N = 200;
  const SimplexGrid g(2, N);
  const TwoStateOracle o{fixture_tables(), N};
  // A nontrivial v_prev so the projected successor lookup matters.
  std::vector<double> v_prev(g.size()), by_k(N + 1);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double p = g.belief(i)[0];
    v_prev[i] = by_k[static_cast<std::size_t>(g.composition(i)[0])] = 3.0 - 2.0 * p + std::sin(7.0 * p);
  }
  const auto r = bellman_backup(m, c, 0.9, v_prev, g, {0.5, 0.5}, all_actions(2));
  const double q0 = o.q(0.5, 0, 0.9, by_k), q1 = o.q(0.5, 1, 0.9, by_k);
  EXPECT_NEAR(r.value, std::min(q0, q1), 1e-12);
  ASSERT_EQ(r.q.size(), 2u);
  EXPECT_NEAR(r.q[0], q0, 1e-12);
  EXPECT_NEAR(r.q[1], q1, 1e-12);

  // From v_prev = 0 the horizon-1 value is min_a cbar.
  const auto r0 = bellman_backup(m, c, 0.9, std::vector<double>(g.size(), 0.0), g, {0.5, 0.5}, all_actions(2));
  EXPECT_NEAR(r0.value, std::min(o.cbar(0.5, 0), o.cbar(0.5, 1)), 1e-12);
}

TEST(BellmanBackup, EmptyActionSetThrows) {
  const auto m = fixture();
  const SimplexGrid g(2, 4);
  EXPECT_THROW(bellman_backup(m, fixture_cost(), 0.9, std::vector<double>(g.size(), 0.0), g, {0.5, 0.5}, {}),
               InvalidArgument);
}

TEST(BellmanBackup, InfiniteCostsOnlyWinWhenAllInfinite) {
  const auto r = reduce_actions({kInf, 2.0}, {0, 1});
  EXPECT_EQ(r.value, 2.0);
  EXPECT_EQ(r.argmin, std::vector<std::size_t>{1});
  const auto all = reduce_actions({kInf, kInf}, {0, 1});
  EXPECT_EQ(all.value, kInf);
  EXPECT_EQ(all.argmin.size(), 2u);
}

// --- value_iteration ---------------------------------------------------------------------

TEST(ValueIteration, UnitCostGeometricSeries) {
  const auto m = fixture();
  const auto c = table_cost(Mat::Ones(2, 2), AssumptionMode::D, 0.5);
  const auto vf = value_iteration(m, c, 20, IterationMode::tolerance(1e-300));
  EXPECT_TRUE(vf.converged);
  for (double v : vf.final_values()) EXPECT_EQ(v, 2.0);
}

TEST(ValueIteration, HorizonSixtyMatchesIndependentLadder) {
  const auto m = fixture();
  const auto c = fixture_cost();
  const std::size_t N = 200;
  const TwoStateOracle o{fixture_tables(), N};
  const auto vf = value_iteration(m, c, N, IterationMode::finite_horizon(60));
  ASSERT_EQ(vf.values.size(), 61u);
  EXPECT_LE(sup_gap(by_k0(vf.grid, vf.final_values()), o.ladder(0.9, 60)), 1e-3);
  EXPECT_LE(sup_gap(by_k0(vf.grid, vf.final_values()), o.ladder(0.9, 60)), 1e-10);
}

TEST(ValueIteration, ToleranceModeWithinEpsilonOfLongLadder) {
  const auto m = fixture();
  const auto c = fixture_cost();
  const std::size_t N = 200;
  const TwoStateOracle o{fixture_tables(), N};
  const auto vf = value_iteration(m, c, N, IterationMode::tolerance(1e-3));
  ASSERT_TRUE(vf.converged);
  EXPECT_LE(vf.sup_diff.back(), vf.stopping_threshold);
  // 0.9^200 * 3 / 0.1 is below 1e-8, so this ladder stands in for the fixed point.
  EXPECT_LE(sup_gap(by_k0(vf.grid, vf.final_values()), o.ladder(0.9, 200)), 1e-3);
  // Against the horizon-60 ladder the gap is governed by the contraction bound.
  const double gap60 = sup_gap(by_k0(vf.grid, vf.final_values()), o.ladder(0.9, 60));
  EXPECT_LE(gap60, std::pow(0.9, 60) / 0.1 * 3.0 + 1e-3);
}

TEST(ValueIteration, MonotoneInHorizonUnderP) {
  for (auto flavor : {Flavor::POMDP, Flavor::POMDP1}) {
    const auto m = finite_model(fixture_tables(), flavor, {0.5, 0.5});
    const auto vf = value_iteration(m, fixture_cost(AssumptionMode::P, 0.9), 50, IterationMode::finite_horizon(30));
    for (std::size_t t = 0; t + 1 < vf.values.size(); ++t)
      for (std::size_t i = 0; i < vf.grid.size(); ++i) EXPECT_GE(vf.values[t + 1][i], vf.values[t][i]);
  }
  const auto inv = inventory3();
  const auto vf = value_iteration(inv, table_cost(inv.finite->cost, AssumptionMode::P, 1.0), 12,
                                  IterationMode::finite_horizon(15));
  for (std::size_t t = 0; t + 1 < vf.values.size(); ++t)
    for (std::size_t i = 0; i < vf.grid.size(); ++i) EXPECT_GE(vf.values[t + 1][i], vf.values[t][i]);
}

TEST(ValueIteration, ContractionUnderD) {
  const auto m = fixture();
  for (std::size_t N : {20, 200, 800}) {
    const auto vf = value_iteration(m, fixture_cost(), N, IterationMode::tolerance(1e-6));
    ASSERT_GE(vf.sup_diff.size(), 12u);
    for (std::size_t k = 1; k < vf.sup_diff.size(); ++k)
      EXPECT_LE(vf.sup_diff[k], 0.9 * vf.sup_diff[k - 1] + 2 * vf.projection_error_bound + 1e-12);
    for (std::size_t k = vf.sup_diff.size() - 10; k < vf.sup_diff.size(); ++k)
      EXPECT_LE(vf.sup_diff[k] / vf.sup_diff[k - 1], 0.9 + 0.02);
  }
}

TEST(ValueIteration, ValuesRespectLowerBoundUnderD) {
  const auto vf = value_iteration(fixture(), fixture_cost(), 50, IterationMode::tolerance(1e-6));
  for (double v : vf.final_values()) EXPECT_GE(v, 1.0 / (1 - 0.9) - 1e-6);
}

TEST(ValueIteration, AffineRescalingKeepsArgmins) {
  const auto m = fixture();
  const double beta = 2.5, gamma = 0.7, alpha = 0.9;
  const std::size_t T = 50;
  const Mat tab = fixture_tables().cost;
  const Mat tab2 = (beta * tab.array() + gamma).matrix();
  const auto vf = value_iteration(m, table_cost(tab, AssumptionMode::D, alpha), 200, IterationMode::finite_horizon(T));
  const auto vf2 =
      value_iteration(m, table_cost(tab2, AssumptionMode::D, alpha), 200, IterationMode::finite_horizon(T));
  const double shift = gamma * (1 - std::pow(alpha, T)) / (1 - alpha);
  for (std::size_t i = 0; i < vf.grid.size(); ++i) {
    EXPECT_NEAR(vf2.final_values()[i], beta * vf.final_values()[i] + shift, 1e-9);
    for (std::size_t t = 0; t < T; ++t) EXPECT_EQ(vf.markov_action(t, i), vf2.markov_action(t, i));
    const auto z = vf.grid.belief(i);
    EXPECT_EQ(optimal_action_set(vf, m, table_cost(tab, AssumptionMode::D, alpha), z),
              optimal_action_set(vf2, m, table_cost(tab2, AssumptionMode::D, alpha), z));
  }
  // Infinite-horizon form: v -> beta v + gamma / (1 - alpha).
  const auto inf1 = value_iteration(m, table_cost(tab, AssumptionMode::D, alpha), 200, IterationMode::tolerance(1e-10));
  const auto inf2 =
      value_iteration(m, table_cost(tab2, AssumptionMode::D, alpha), 200, IterationMode::tolerance(1e-10));
  EXPECT_EQ(inf1.policy, inf2.policy);
  for (std::size_t i = 0; i < inf1.grid.size(); ++i)
    EXPECT_NEAR(inf2.final_values()[i], beta * inf1.final_values()[i] + gamma / (1 - alpha), 1e-8);
}

TEST(ValueIteration, DiscountOneRejectedUnderD) {
  const auto m = fixture();
  EXPECT_THROW(value_iteration(m, fixture_cost(AssumptionMode::D, 1.0), 10, IterationMode::finite_horizon(3)),
               InvalidArgument);
  const auto mdp = build_belief_mdp(m, fixture_cost(AssumptionMode::P, 1.0), 10);
  EXPECT_THROW(value_iteration(mdp, 1.0, AssumptionMode::D, IterationMode::finite_horizon(3)), InvalidArgument);
  EXPECT_THROW(value_iteration(mdp, 1.0, AssumptionMode::P, IterationMode::tolerance(1e-3)), InvalidArgument);
  EXPECT_NO_THROW(value_iteration(mdp, 1.0, AssumptionMode::P, IterationMode::finite_horizon(3)));
}

TEST(ValueIteration, UnboundedOrNegativeTablesRejected) {
  const auto m = fixture();
  Mat neg = fixture_tables().cost;
  neg(0, 0) = -1.0;
  EXPECT_THROW(build_belief_mdp(m, table_cost(neg, AssumptionMode::P, 0.9), 10), InvalidArgument);
  Mat bad = fixture_tables().cost;
  bad(1, 1) = -kInf;
  EXPECT_THROW(build_belief_mdp(m, table_cost(bad, AssumptionMode::D, 0.9), 10), InvalidArgument);
}

TEST(ValueIteration, InventoryPolicyMonotoneInMeanStock) {
  const auto m = inventory3();
  const auto c = table_cost(m.finite->cost, AssumptionMode::P, 1.0);
  // Horizon-3 first-stage orders by exhaustive enumeration of observation
  // histories, on the grid nodes.
  auto enumerate = [&](const SimplexGrid& g, std::vector<std::size_t>& act, std::vector<double>& margin) {
    act.resize(g.size());
    margin.resize(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) exact_value(*m.finite, g.belief(i), 3, &act[i], &margin[i]);
  };
  {
    const SimplexGrid g(3, 12);
    std::vector<std::size_t> act;
    std::vector<double> margin;
    enumerate(g, act, margin);
    for (std::size_t i = 0; i < g.size(); ++i)
      for (std::size_t j = 0; j < g.size(); ++j)
        if (mean_stock(g.belief(i)) < mean_stock(g.belief(j)) - 1e-12) {
          EXPECT_GE(act[i], act[j]);
        }
  }
  // On finer grids the mean alone no longer orders the policy; stochastic
  // dominance does.
  auto dominates = [](const std::vector<double>& a, const std::vector<double>& b) {
    return b[2] >= a[2] - 1e-12 && b[1] + b[2] >= a[1] + a[2] - 1e-12;
  };
  const auto vf = value_iteration(m, c, 30, IterationMode::finite_horizon(3));
  const auto& g = vf.grid;
  std::vector<std::size_t> act;
  std::vector<double> margin;
  enumerate(g, act, margin);
  std::size_t clear = 0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    for (std::size_t j = 0; j < g.size(); ++j)
      if (dominates(g.belief(i), g.belief(j))) {
        EXPECT_GE(act[i], act[j]);
      }
    // Projection error only flips near-ties.
    if (margin[i] > 0.1) {
      ++clear;
      EXPECT_EQ(vf.markov_action(0, i), act[i]) << "node " << i;
    }
  }
  EXPECT_GT(clear, g.size() / 2);
}

TEST(ValueIteration, GridValuesConvergeToExactUnderRefinement) {
  const auto m = fixture();
  const auto c = fixture_cost();
  const FiniteTables t = fixture_tables();
  // Exact discounted horizon-6 value with no projection.
  std::function<double(const std::vector<double>&, std::size_t)> exact = [&](const std::vector<double>& z,
                                                                             std::size_t T) -> double {
    if (T == 0) return 0.0;
    double best = kInf;
    for (std::size_t a = 0; a < 2; ++a) {
      double val = z[0] * t.cost(0, a) + z[1] * t.cost(1, a);
      for (std::size_t y = 0; y < 2; ++y) {
        double post[2];
        for (std::size_t x2 = 0; x2 < 2; ++x2)
          post[x2] = (z[0] * t.transition[a](0, x2) + z[1] * t.transition[a](1, x2)) * t.observation[a](x2, y);
        const double r = post[0] + post[1];
        if (r > 0) val += 0.9 * r * exact({post[0] / r, post[1] / r}, T - 1);
      }
      best = std::min(best, val);
    }
    return best;
  };
  double prev = kInf;
  for (std::size_t N : {10, 40, 160}) {
    const auto vf = value_iteration(m, c, N, IterationMode::finite_horizon(6));
    double err = 0;
    for (std::size_t i = 0; i < vf.grid.size(); ++i)
      err = std::max(err, std::abs(vf.final_values()[i] - exact(vf.grid.belief(i), 6)));
    EXPECT_LT(err, prev) << "N = " << N;
    prev = err;
  }
}

TEST(ValueIteration, JsonAndConvergenceCsv) {
  const auto vf = value_iteration(fixture(), fixture_cost(), 10, IterationMode::tolerance(1e-3));
  const auto j = to_json(vf);
  EXPECT_EQ(j.at("nodes").size(), 11u);
  EXPECT_EQ(j.at("policy").size(), 11u);
  EXPECT_TRUE(j.at("converged").get<bool>());
  std::ostringstream os;
  write_convergence_csv(os, vf);
  const auto s = os.str();
  EXPECT_EQ(s.rfind("iteration,sup_diff\n", 0), 0u);
  EXPECT_EQ(static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')), vf.sup_diff.size() + 1);
}

// --- optimal_action_set --------------------------------------------------------------------

TEST(OptimalActionSet, SymmetricModelReturnsBoth) {
  FiniteTables t = fixture_tables();
  t.transition[1] = t.transition[0];
  t.observation[1] = t.observation[0];
  t.cost.col(1) = t.cost.col(0);
  const auto m = finite_model(t, Flavor::POMDP, {0.5, 0.5});
  const auto c = table_cost(t.cost, AssumptionMode::D, 0.9);
  const auto vf = value_iteration(m, c, 50, IterationMode::tolerance(1e-6));
  for (double p : {0.0, 0.3, 0.5, 1.0}) EXPECT_EQ(optimal_action_set(vf, m, c, {p, 1 - p}), all_actions(2));
  for (auto a : vf.policy) EXPECT_EQ(a, 0u);  // lowest-index tie-break
}

TEST(OptimalActionSet, MyopicIsArgminOfLiftedCost) {
  const auto m = fixture();
  const auto c = fixture_cost(AssumptionMode::D, 0.0);
  const auto vf = value_iteration(m, c, 20, IterationMode::finite_horizon(1));
  const TwoStateOracle o{fixture_tables(), 20};
  for (double p : {0.0, 0.1, 0.5, 0.9, 1.0}) {
    const double c0 = o.cbar(p, 0), c1 = o.cbar(p, 1);
    std::vector<std::size_t> want;
    if (c0 <= std::min(c0, c1) + kArgminTol) want.push_back(0);
    if (c1 <= std::min(c0, c1) + kArgminTol) want.push_back(1);
    EXPECT_EQ(optimal_action_set(vf, m, c, {p, 1 - p}), want);
  }
}

TEST(OptimalActionSet, FixtureSingletonMatchesOracle) {
  const auto m = fixture();
  const auto c = fixture_cost();
  const std::size_t N = 200;
  const auto vf = value_iteration(m, c, N, IterationMode::tolerance(1e-8));
  const TwoStateOracle o{fixture_tables(), N};
  const auto v = by_k0(vf.grid, vf.final_values());
  std::size_t checked = 0;
  for (std::size_t k = 0; k <= N; k += 5) {
    const double p = static_cast<double>(k) / N;
    const double q0 = o.q(p, 0, 0.9, v), q1 = o.q(p, 1, 0.9, v);
    if (std::abs(q0 - q1) <= 10 * kArgminTol) continue;
    ++checked;
    const auto set = optimal_action_set(vf, m, c, {p, 1 - p});
    ASSERT_EQ(set.size(), 1u);
    EXPECT_EQ(set[0], q0 < q1 ? 0u : 1u);
  }
  EXPECT_GT(checked, 30u);
}

// --- kinf_compact_probe ----------------------------------------------------------------

TEST(KinfProbe, QuadraticWithDefiniteABounded) {
  const Mat X = Mat::Identity(2, 2);
  const Mat A = (Mat(2, 2) << 2.0, 0.5, 0.5, 1.0).finished();
  const double gamma = 4.0;
  const Box C{Vec::Constant(2, -1.0), Vec::Constant(2, 1.0)};
  const Box S{Vec::Constant(2, -1.0), Vec::Constant(2, 1.0)};
  const auto rep = kinf_compact_probe(quadratic_cost(X, A), C, gamma, S);
  EXPECT_EQ(rep.verdict, ProbeVerdict::Bounded);
  const double bound = quadratic_action_radius_bound(A, gamma);
  EXPECT_NEAR(bound, std::sqrt(gamma / min_eigenvalue(A)), 1e-12);
  EXPECT_LE(rep.escape_radius, bound * (1 + 1e-6));
  // The bound is attained with x = 0 along the smallest eigenvector.
  EXPECT_GE(rep.escape_radius, 0.99 * bound);
}

TEST(KinfProbe, EstimationWithNonsingularABounded) {
  const Mat X = (Mat(2, 2) << 1.0, 0.3, 0.0, 2.0).finished();
  const Mat A = (Mat(2, 2) << 1.5, 0.0, 0.4, 0.8).finished();
  const double gamma = 1.0, r = std::sqrt(2.0);
  const Box C{Vec::Constant(2, -1.0), Vec::Constant(2, 1.0)};
  const Box S{Vec::Constant(2, -1.0), Vec::Constant(2, 1.0)};
  const auto rep = kinf_compact_probe(estimation_cost(X, A), C, gamma, S);
  EXPECT_EQ(rep.verdict, ProbeVerdict::Bounded);
  EXPECT_LE(rep.escape_radius, estimation_action_radius_bound(X, A, gamma, r) * (1 + 1e-6));
  ASSERT_TRUE(rep.witness_a.has_value());
  EXPECT_LE((A * *rep.witness_a).norm(), gamma + X.norm() * r);
}

TEST(KinfProbe, SingularXUnboundedInGrowingMode) {
  const Mat X = (Mat(2, 2) << 1.0, 1.0, 1.0, 1.0).finished();  // null direction (1, -1)/sqrt 2
  const Mat A = Mat::Identity(1, 1);
  const Box C{Vec::Constant(2, -1.0), Vec::Constant(2, 1.0)};
  const Box S{Vec::Constant(1, -1.0), Vec::Constant(1, 1.0)};
  KinfProbeOptions opt;
  opt.grow_state_box = true;
  const auto rep = kinf_compact_probe(quadratic_cost(X, A), C, 1.0, S, opt);
  ASSERT_EQ(rep.verdict, ProbeVerdict::UnboundedWitness);
  ASSERT_TRUE(rep.ray.has_value());
  const Vec null = (Vec(3) << 1.0, -1.0, 0.0).finished() / std::sqrt(2.0);
  EXPECT_GT(std::abs(rep.ray->dot(null)), 0.99);
  EXPECT_LE(rep.witness_cost, 1.0);
  EXPECT_EQ(rep.escape_radius, kInf);

  // Same cost with x held in C stays bounded.
  const auto k = kinf_compact_probe(quadratic_cost(X, A), C, 1.0, S);
  EXPECT_EQ(k.verdict, ProbeVerdict::Bounded);
}

TEST(KinfProbe, ReportJson) {
  const Box C{Vec::Constant(1, -1.0), Vec::Constant(1, 1.0)};
  const auto rep = kinf_compact_probe(quadratic_cost(Mat::Identity(1, 1), Mat::Identity(1, 1)), C, 1.0, C);
  const auto j = to_json(rep);
  EXPECT_EQ(j.at("verdict"), "bounded");
  EXPECT_EQ(j.at("shell_radii").size(), 11u);
  EXPECT_DOUBLE_EQ(j.at("max_radius_searched").get<double>(), 1024.0);
}

// --- simulate_policy --------------------------------------------------------------------

TEST(SimulatePolicy, ZeroCostEverywhere) {
  const auto m = fixture();
  const auto c = table_cost(Mat::Zero(2, 2), AssumptionMode::P, 0.9);
  const auto s = simulate_policy(m, c, constant_policy(1), 20, 0.9, 3, 200);
  EXPECT_EQ(s.costs.size(), 200u);
  for (double v : s.costs) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(s.mean, 0.0);
  EXPECT_EQ(s.excluded, 0u);
}

TEST(SimulatePolicy, OptimalBeatsUniformRandomOnPairedSeeds) {
  const auto m = fixture();
  const auto c = fixture_cost();
  const auto vf = value_iteration(m, c, 200, IterationMode::tolerance(1e-6));
  const std::size_t H = 60, E = 10000;
  const auto opt = simulate_policy(m, c, grid_policy(vf), H, 0.9, 21, E);
  // Mean and 3-sigma band of the paired differences opt - other.
  auto paired = [&](const EpisodeStats& other) {
    EXPECT_EQ(other.costs.size(), E);
    double s = 0, q = 0;
    for (std::size_t e = 0; e < E; ++e) s += opt.costs[e] - other.costs[e];
    const double md = s / E;
    for (std::size_t e = 0; e < E; ++e) q += std::pow(opt.costs[e] - other.costs[e] - md, 2);
    return std::pair{md, 3 * std::sqrt(q / (E - 1) / E)};
  };
  const auto [d_rnd, band_rnd] = paired(simulate_policy(m, c, hashed_uniform_policy(2, 99), H, 0.9, 21, E));
  EXPECT_LE(d_rnd, -band_rnd);
  for (std::size_t a : {0, 1}) {
    const auto [d, band] = paired(simulate_policy(m, c, constant_policy(a), H, 0.9, 21, E));
    EXPECT_LE(d, band) << "constant action " << a;
  }
}

TEST(SimulatePolicy, MyopicSingleStepMatchesLiftedCost) {
  const auto m = fixture();
  const auto c = fixture_cost(AssumptionMode::D, 0.0);
  const Belief p0 = FiniteBelief::over_indices({0.5, 0.5});
  const auto vf = value_iteration(m, c, 20, IterationMode::finite_horizon(1));
  for (const auto& rule : {markov_grid_policy(vf), constant_policy(0)}) {
    const Vec a = rule(0, p0);
    const double want = lift_cost(c, p0, a).value;
    const auto s = simulate_policy(m, c, rule, 1, 0.0, 5, 20000);
    EXPECT_NEAR(s.mean, want, std::max(s.band, 1e-12)) << "action " << a[0];
  }
}

TEST(SimulatePolicy, SameSeedSameCosts) {
  const auto m = fixture();
  const auto c = fixture_cost();
  const auto a = simulate_policy(m, c, hashed_uniform_policy(2, 1), 15, 0.9, 8, 300);
  const auto b = simulate_policy(m, c, hashed_uniform_policy(2, 1), 15, 0.9, 8, 300);
  EXPECT_EQ(a.costs, b.costs);
}
