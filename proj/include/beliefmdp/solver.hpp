#pragma once

// Belief-MDP solver for finite hidden-state models on a regular simplex
// grid, plus cost utilities and the K-inf-compactness probe.

#include "beliefmdp/filter.hpp"

#include <numeric>

namespace beliefmdp {

// ---------------------------------------------------------------------------
// Costs

enum class AssumptionMode { D, P };

inline const char* to_string(AssumptionMode m) { return m == AssumptionMode::D ? "D" : "P"; }
inline AssumptionMode assumption_from_string(const std::string& s) {
  if (s == "D") return AssumptionMode::D;
  if (s == "P") return AssumptionMode::P;
  throw InvalidArgument("unknown assumption mode '" + s + "' (expected D or P)");
}

struct CostSpec {
  std::function<double(const Vec& x, const Vec& a)> c;
  double lower_bound = 0.0;
  AssumptionMode mode = AssumptionMode::D;
  double alpha = 0.9;
  /// quadratic | estimation | inventory | table | custom
  std::string family = "custom";
  Mat X, A;
  /// cost(x, a) by state and action index, for finite models.
  std::optional<Mat> table;
  json params = json::object();

  double operator()(const Vec& x, const Vec& a) const { return c(x, a); }
};

inline json to_json(const CostSpec& c) {
  json j = {{"family", c.family},
            {"lower_bound", c.lower_bound},
            {"mode", to_string(c.mode)},
            {"alpha", c.alpha},
            {"params", c.params}};
  if (c.X.size() > 0) j["X"] = to_json_mat(c.X);
  if (c.A.size() > 0) j["A"] = to_json_mat(c.A);
  if (c.table) j["table"] = to_json_mat(*c.table);
  return j;
}

/// Checks alpha against the mode, and the table (when present) against
/// lower_bound (D) or nonnegativity (P).
inline void validate(const CostSpec& c) {
  require(static_cast<bool>(c.c), "cost: missing cost function");
  if (c.mode == AssumptionMode::D) {
    if (!(c.alpha >= 0.0 && c.alpha < 1.0))
      throw InvalidArgument("cost: discount factor must lie in [0, 1) under mode D", json{{"alpha", c.alpha}});
  } else {
    if (!(c.alpha >= 0.0)) throw InvalidArgument("cost: discount factor must be >= 0 under mode P", json{{"alpha", c.alpha}});
  }
  if (c.table) {
    for (Eigen::Index i = 0; i < c.table->rows(); ++i) {
      for (Eigen::Index j = 0; j < c.table->cols(); ++j) {
        const double v = (*c.table)(i, j);
        if (std::isnan(v) || v == -kInf)
          throw InvalidArgument("cost: table entry is NaN or unbounded below", json{{"state", i}, {"action", j}});
        if (c.mode == AssumptionMode::D && v < c.lower_bound)
          throw InvalidArgument("cost: table entry below the declared lower bound",
                                json{{"state", i}, {"action", j}, {"value", v}, {"lower_bound", c.lower_bound}});
        if (c.mode == AssumptionMode::P && v < 0.0)
          throw InvalidArgument("cost: negative table entry under mode P", json{{"state", i}, {"action", j}, {"value", v}});
      }
    }
  }
}

/// c(x, a) = x'Xx + a'Aa.
inline CostSpec quadratic_cost(const Mat& X, const Mat& A) {
  require(X.rows() == X.cols() && A.rows() == A.cols(), "quadratic cost: X and A must be square");
  CostSpec c;
  c.family = "quadratic";
  c.X = X;
  c.A = A;
  c.c = [X, A](const Vec& x, const Vec& a) { return x.dot(X * x) + a.dot(A * a); };
  c.mode = AssumptionMode::P;
  return c;
}

/// c(x, a) = |Xx - Aa| (Euclidean).
inline CostSpec estimation_cost(const Mat& X, const Mat& A) {
  require(X.rows() == A.rows(), "estimation cost: X and A must have the same number of rows");
  CostSpec c;
  c.family = "estimation";
  c.X = X;
  c.A = A;
  c.c = [X, A](const Vec& x, const Vec& a) { return (X * x - A * a).norm(); };
  c.mode = AssumptionMode::P;
  return c;
}

/// Cost from a state-by-action table (finite models; x and a are indices).
inline CostSpec table_cost(const Mat& table, AssumptionMode mode, double alpha) {
  CostSpec c;
  c.family = "table";
  c.table = table;
  c.mode = mode;
  c.alpha = alpha;
  c.lower_bound = table.size() > 0 ? table.minCoeff() : 0.0;
  if (mode == AssumptionMode::P) c.lower_bound = 0.0;
  c.c = [table](const Vec& x, const Vec& a) {
    return table(static_cast<Eigen::Index>(as_index(x, static_cast<std::size_t>(table.rows()), "state")),
                 static_cast<Eigen::Index>(as_index(a, static_cast<std::size_t>(table.cols()), "action")));
  };
  return c;
}

/// c(x, a) = sum_j [K_j 1{a_j > 0} + cbar_j a_j] + E h(L(x + a - xi)) with
/// h(v) = sum_j holding_j max(v_j, 0) + backorder_j max(-v_j, 0). The
/// expectation uses a fixed seeded demand sample.
inline CostSpec inventory_cost(const StochasticControlModel& m, const Vec& fixed, const Vec& unit, const Vec& holding,
                               const Vec& backorder, long long demand_samples = 4096, std::uint64_t seed = 0) {
  const Eigen::Index d = m.state_dim;
  require_dim(fixed, d, "fixed order cost");
  require_dim(unit, d, "unit order cost");
  require_dim(holding, d, "holding cost");
  require_dim(backorder, d, "backorder cost");
  require((fixed.array() >= 0).all() && (unit.array() >= 0).all() && (holding.array() >= 0).all() &&
              (backorder.array() >= 0).all(),
          "inventory cost: coefficients must be nonnegative");
  const bool lost = m.name == "inventory_lost_sales";
  const auto demand = std::make_shared<std::vector<Vec>>(m.mu.sample(seed, demand_samples));
  CostSpec c;
  c.family = "inventory";
  c.mode = AssumptionMode::P;
  c.params = {{"fixed", to_json_vec(fixed)},
              {"unit", to_json_vec(unit)},
              {"holding", to_json_vec(holding)},
              {"backorder", to_json_vec(backorder)},
              {"demand_samples", demand_samples},
              {"seed", seed}};
  c.c = [=](const Vec& x, const Vec& a) {
    double order = 0.0;
    for (Eigen::Index j = 0; j < d; ++j) order += (a[j] > 0.0 ? fixed[j] : 0.0) + unit[j] * a[j];
    double h = 0.0;
    for (const auto& xi : *demand) {
      Vec v = x + a - xi;
      if (lost) v = v.cwiseMax(0.0);
      h += holding.dot(v.cwiseMax(0.0)) + backorder.dot((-v).cwiseMax(0.0));
    }
    return order + h / static_cast<double>(demand->size());
  };
  return c;
}

struct LiftedCost {
  double value = 0.0;
  double band = 0.0;  ///< 3 standard errors for Monte Carlo lifts
  std::string mode;
};

/// cbar(z, a) = int c(x, a) z(dx).
inline LiftedCost lift_cost(const CostSpec& cost, const Belief& z, const Vec& a, long long mc_samples = 100000,
                            std::uint64_t seed = 0) {
  LiftedCost out;
  if (const auto* f = std::get_if<FiniteBelief>(&z)) {
    out.mode = "exact";
    for (std::size_t i = 0; i < f->weights.size(); ++i) {
      if (f->weights[i] == 0.0) continue;  // never evaluate off the support
      const double v = cost(f->states[i], a);
      if (v == kInf) {
        out.value = kInf;
        return out;
      }
      out.value += f->weights[i] * v;
    }
    return out;
  }
  if (const auto* g = std::get_if<GaussianBelief>(&z); g && cost.family == "quadratic") {
    out.mode = "closed_form";
    out.value = g->mean.dot(cost.X * g->mean) + (cost.X * g->cov).trace() + a.dot(cost.A * a);
    return out;
  }
  // Monte Carlo: particle weights, or draws from a Gaussian.
  double s = 0.0, q = 0.0, w2 = 0.0;
  if (const auto* p = std::get_if<ParticleBelief>(&z)) {
    out.mode = "particles";
    for (std::size_t i = 0; i < p->points.size(); ++i) {
      if (p->weights[i] == 0.0) continue;
      const double v = cost(p->points[i], a);
      if (v == kInf) {
        out.value = kInf;
        return out;
      }
      s += p->weights[i] * v;
      q += p->weights[i] * v * v;
      w2 += p->weights[i] * p->weights[i];
    }
  } else {
    out.mode = "monte_carlo";
    require(mc_samples > 0, "lift_cost: mc_samples must be positive");
    Rng rng = make_rng(derive_seed(seed, 0x11f7ULL));
    const double w = 1.0 / static_cast<double>(mc_samples);
    for (long long i = 0; i < mc_samples; ++i) {
      const double v = cost(sample_belief(z, rng), a);
      if (v == kInf) {
        out.value = kInf;
        return out;
      }
      s += w * v;
      q += w * v * v;
    }
    w2 = w;
  }
  out.value = s;
  out.band = 3.0 * std::sqrt(std::max(0.0, q - s * s) * w2);
  return out;
}

// ---------------------------------------------------------------------------
// Simplex grid

/// Beliefs k / N with k a composition of N into n_states parts; mesh 1/N.
class SimplexGrid {
 public:
  SimplexGrid(std::size_t n_states, std::size_t N) : n_(n_states), N_(N) {
    require(n_states >= 1 && N >= 1, "simplex grid: need n_states >= 1 and N >= 1");
    std::vector<int> k(n_, 0);
    enumerate(k, 0, static_cast<int>(N_));
    for (std::size_t i = 0; i < nodes_.size(); ++i) require(rank(nodes_[i]) == i, "simplex grid: ranking mismatch");
  }

  std::size_t n_states() const { return n_; }
  std::size_t resolution() const { return N_; }
  double mesh() const { return 1.0 / static_cast<double>(N_); }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<int>& composition(std::size_t i) const { return nodes_[i]; }

  std::vector<double> belief(std::size_t i) const {
    std::vector<double> w(n_);
    for (std::size_t j = 0; j < n_; ++j) w[j] = static_cast<double>(nodes_[i][j]) / static_cast<double>(N_);
    return w;
  }

  /// Nearest node by largest-remainder rounding (ties to the lower index).
  std::size_t project(const std::vector<double>& z) const {
    require(z.size() == n_, "simplex grid: belief size differs from n_states");
    std::vector<int> k(n_);
    std::vector<std::pair<double, std::size_t>> frac(n_);
    int total = 0;
    for (std::size_t j = 0; j < n_; ++j) {
      const double t = std::max(0.0, z[j]) * static_cast<double>(N_);
      k[j] = static_cast<int>(std::floor(t));
      total += k[j];
      frac[j] = {t - std::floor(t), j};
    }
    std::stable_sort(frac.begin(), frac.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    int missing = static_cast<int>(N_) - total;
    for (std::size_t r = 0; missing > 0; r = (r + 1) % n_, --missing) ++k[frac[r].second];
    for (std::size_t j = n_; missing < 0 && j-- > 0;) {  // only if z sums above 1 by rounding
      while (missing < 0 && k[j] > 0) {
        --k[j];
        ++missing;
      }
    }
    return rank(k);
  }

  /// Upper bound on the l1 distance between a belief and its projection.
  double projection_error_bound() const { return static_cast<double>(n_) / static_cast<double>(N_); }

  std::size_t rank(const std::vector<int>& k) const {
    std::size_t r = 0;
    int remaining = static_cast<int>(N_);
    for (std::size_t i = 0; i + 1 < n_; ++i) {
      for (int v = 0; v < k[i]; ++v) r += count(n_ - i - 1, remaining - v);
      remaining -= k[i];
    }
    return r;
  }

 private:
  static std::size_t binom(std::size_t n, std::size_t k) {
    if (k > n) return 0;
    std::size_t r = 1;
    for (std::size_t i = 1; i <= k; ++i) r = r * (n - k + i) / i;
    return r;
  }
  /// Compositions of s into p nonnegative parts.
  static std::size_t count(std::size_t p, int s) {
    if (s < 0) return 0;
    if (p == 0) return s == 0 ? 1 : 0;
    return binom(static_cast<std::size_t>(s) + p - 1, p - 1);
  }
  void enumerate(std::vector<int>& k, std::size_t i, int remaining) {
    if (i + 1 == n_) {
      k[i] = remaining;
      nodes_.push_back(k);
      return;
    }
    for (int v = 0; v <= remaining; ++v) {
      k[i] = v;
      enumerate(k, i + 1, remaining - v);
    }
  }

  std::size_t n_, N_;
  std::vector<std::vector<int>> nodes_;
};

// ---------------------------------------------------------------------------
// Bellman backups

inline constexpr double kArgminTol = 1e-9;

struct BackupResult {
  double value = kInf;
  std::vector<std::size_t> argmin;
  std::vector<double> q;  ///< per action in the action set
};

/// min over actions of q(a), argmin within tol; +inf actions only count
/// when every action is +inf.
inline BackupResult reduce_actions(const std::vector<double>& q, const std::vector<std::size_t>& actions,
                                   double tol = kArgminTol) {
  require(!actions.empty(), "bellman backup: empty action set");
  BackupResult r;
  r.q = q;
  for (double v : q) r.value = std::min(r.value, v);
  for (std::size_t i = 0; i < q.size(); ++i)
    if (r.value == kInf || q[i] <= r.value + tol) r.argmin.push_back(actions[i]);
  return r;
}

/// One successor of a (node, action) pair: observation probability and
/// projected posterior node.
struct Successor {
  double prob = 0.0;
  std::size_t next = 0;
};

/// Cost and successors of every (node, action), computed once with exact
/// tables and reused across sweeps.
struct DiscretizedBeliefMdp {
  SimplexGrid grid;
  std::size_t n_actions = 0;
  std::vector<double> cbar;                  ///< [node * n_actions + a]
  std::vector<std::vector<Successor>> succ;  ///< [node * n_actions + a]
  double lower_bound = 0.0;

  DiscretizedBeliefMdp(SimplexGrid g) : grid(std::move(g)) {}
};

namespace detail {

inline Mat cost_table(const StochasticControlModel& m, const CostSpec& cost) {
  const auto& t = *m.finite;
  if (cost.table) {
    require(cost.table->rows() == static_cast<Eigen::Index>(t.n_states) &&
                cost.table->cols() == static_cast<Eigen::Index>(t.n_actions),
            "cost table shape differs from the model");
    return *cost.table;
  }
  Mat tab(t.n_states, t.n_actions);
  for (std::size_t x = 0; x < t.n_states; ++x)
    for (std::size_t a = 0; a < t.n_actions; ++a)
      tab(static_cast<Eigen::Index>(x), static_cast<Eigen::Index>(a)) = cost(index_vec(x), index_vec(a));
  return tab;
}

/// cbar(z, a) and the pairs (R'(y|z,a), H(z,a,y)) for every y with R' > 0.
inline void exact_step(const StochasticControlModel& m, const Mat& costs, const std::vector<double>& z, std::size_t a,
                       double& cbar, std::vector<std::pair<double, std::vector<double>>>& out) {
  const auto& t = *m.finite;
  const Eigen::Map<const Eigen::RowVectorXd> zr(z.data(), static_cast<Eigen::Index>(z.size()));
  cbar = 0.0;
  for (std::size_t x = 0; x < z.size(); ++x) {
    if (z[x] == 0.0) continue;
    const double c = costs(static_cast<Eigen::Index>(x), static_cast<Eigen::Index>(a));
    if (c == kInf) {
      cbar = kInf;
      break;
    }
    cbar += z[x] * c;
  }
  out.clear();
  const Eigen::RowVectorXd pred = zr * t.transition[a];
  for (std::size_t y = 0; y < t.n_obs; ++y) {
    Eigen::RowVectorXd post;
    if (m.flavor == Flavor::POMDP) {
      post = pred.cwiseProduct(t.observation[a].col(static_cast<Eigen::Index>(y)).transpose());
    } else {
      post = zr.cwiseProduct(t.observation[a].col(static_cast<Eigen::Index>(y)).transpose()) * t.transition[a];
    }
    const double p = post.sum();
    if (!(p > 0.0)) continue;
    post /= p;
    out.emplace_back(p, std::vector<double>(post.data(), post.data() + post.size()));
  }
}

}  // namespace detail

/// Backup at an arbitrary finite belief z (weights over state indices):
/// min over actions of cbar(z, a) + alpha sum_y R'(y|z,a) v_prev(proj H(z,a,y)).
inline BackupResult bellman_backup(const StochasticControlModel& m, const CostSpec& cost, double alpha,
                                   const std::vector<double>& v_prev, const SimplexGrid& grid,
                                   const std::vector<double>& z, const std::vector<std::size_t>& actions) {
  require(m.finite.has_value(), "bellman_backup: model needs exact tables");
  require(v_prev.size() == grid.size(), "bellman_backup: value vector size differs from the grid");
  require(!actions.empty(), "bellman backup: empty action set");
  const Mat costs = detail::cost_table(m, cost);
  std::vector<double> q;
  std::vector<std::pair<double, std::vector<double>>> step;
  for (auto a : actions) {
    require(a < m.finite->n_actions, "bellman_backup: action index out of range");
    double cbar = 0.0;
    detail::exact_step(m, costs, z, a, cbar, step);
    double val = cbar;
    if (alpha != 0.0 && val != kInf) {
      double cont = 0.0;
      for (const auto& [p, post] : step) cont += p * v_prev[grid.project(post)];
      val += alpha * cont;
    }
    q.push_back(val);
  }
  return reduce_actions(q, actions);
}

inline DiscretizedBeliefMdp build_belief_mdp(const StochasticControlModel& m, const CostSpec& cost, std::size_t N) {
  require(m.finite.has_value(), "value iteration needs a finite hidden-state model with exact tables");
  validate(cost);
  const auto& t = *m.finite;
  DiscretizedBeliefMdp mdp{SimplexGrid(t.n_states, N)};
  mdp.n_actions = t.n_actions;
  const Mat costs = detail::cost_table(m, cost);
  if (cost.mode == AssumptionMode::P && costs.minCoeff() < 0.0)
    throw InvalidArgument("cost: negative entry under mode P");
  if (cost.mode == AssumptionMode::D && costs.minCoeff() < cost.lower_bound)
    throw InvalidArgument("cost: entry below the declared lower bound under mode D");
  if (costs.minCoeff() == -kInf || costs.hasNaN()) throw InvalidArgument("cost: table is unbounded below or NaN");
  mdp.lower_bound = costs.minCoeff();
  const std::size_t nodes = mdp.grid.size();
  mdp.cbar.assign(nodes * t.n_actions, 0.0);
  mdp.succ.assign(nodes * t.n_actions, {});
  parallel_for(nodes, [&](std::size_t i) {
    const auto z = mdp.grid.belief(i);
    std::vector<std::pair<double, std::vector<double>>> step;
    for (std::size_t a = 0; a < t.n_actions; ++a) {
      detail::exact_step(m, costs, z, a, mdp.cbar[i * t.n_actions + a], step);
      auto& s = mdp.succ[i * t.n_actions + a];
      for (const auto& [p, post] : step) s.push_back({p, mdp.grid.project(post)});
    }
  });
  return mdp;
}

/// Backup at grid node `node` against v_prev.
inline BackupResult bellman_backup(const DiscretizedBeliefMdp& mdp, double alpha, const std::vector<double>& v_prev,
                                   std::size_t node, const std::vector<std::size_t>& actions) {
  std::vector<double> q;
  q.reserve(actions.size());
  for (auto a : actions) {
    double val = mdp.cbar[node * mdp.n_actions + a];
    if (alpha != 0.0 && val != kInf) {
      double cont = 0.0;
      for (const auto& s : mdp.succ[node * mdp.n_actions + a]) cont += s.prob * v_prev[s.next];
      val += alpha * cont;
    }
    q.push_back(val);
  }
  return reduce_actions(q, actions);
}

// ---------------------------------------------------------------------------
// Value iteration

struct IterationMode {
  enum class Kind { Horizon, Tolerance } kind = Kind::Tolerance;
  std::size_t horizon = 0;
  double epsilon = 1e-6;
  std::size_t max_iterations = 100000;

  static IterationMode finite_horizon(std::size_t T) { return {Kind::Horizon, T, 0.0, T}; }
  static IterationMode tolerance(double eps, std::size_t max_iter = 100000) { return {Kind::Tolerance, 0, eps, max_iter}; }
};

struct ValueFunction {
  explicit ValueFunction(SimplexGrid g) : grid(std::move(g)) {}

  SimplexGrid grid;
  double alpha = 0.0;
  /// values[k] = v_k on the grid; horizon mode keeps v_0..v_T, tolerance
  /// mode v_0 and the last two iterates.
  std::vector<std::vector<double>> values;
  std::vector<std::size_t> iterations_of_values;
  /// greedy[k][node] = lowest-index minimizer when computing v_{k+1}.
  std::vector<std::vector<std::size_t>> greedy;
  /// Stationary greedy policy from the final backup.
  std::vector<std::size_t> policy;
  std::vector<double> sup_diff;  ///< |v_{k+1} - v_k|_inf per sweep
  bool converged = false;
  double stopping_threshold = 0.0;
  double projection_error_bound = 0.0;
  std::string mode;

  const std::vector<double>& final_values() const { return values.back(); }
  /// Action at time t of a horizon-T problem (Markov policy).
  std::size_t markov_action(std::size_t t, std::size_t node) const {
    const std::size_t T = greedy.size();
    require(t < T, "markov_action: time beyond the horizon");
    return greedy[T - 1 - t][node];
  }
};

namespace detail {
inline double value_gap(const std::vector<double>& a, const std::vector<double>& b) {
  double g = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i]) continue;  // includes +inf == +inf
    g = std::max(g, std::abs(a[i] - b[i]));
  }
  return g;
}
}  // namespace detail

inline ValueFunction value_iteration(const DiscretizedBeliefMdp& mdp, double alpha, AssumptionMode assumption,
                                     const IterationMode& mode) {
  if (assumption == AssumptionMode::D && !(alpha >= 0.0 && alpha < 1.0))
    throw InvalidArgument("value_iteration: discount factor must lie in [0, 1) under mode D", json{{"alpha", alpha}});
  if (!(alpha >= 0.0)) throw InvalidArgument("value_iteration: discount factor must be nonnegative");
  if (mode.kind == IterationMode::Kind::Tolerance) {
    require(mode.epsilon > 0.0, "value_iteration: epsilon must be positive");
    if (!(alpha < 1.0))
      throw InvalidArgument("value_iteration: tolerance mode needs alpha < 1; use a finite horizon");
  }
  ValueFunction vf(mdp.grid);
  vf.alpha = alpha;
  vf.projection_error_bound = mdp.grid.projection_error_bound();
  vf.mode = mode.kind == IterationMode::Kind::Horizon ? "horizon" : "tolerance";
  const std::size_t nodes = mdp.grid.size();
  std::vector<std::size_t> all(mdp.n_actions);
  std::iota(all.begin(), all.end(), std::size_t{0});

  std::vector<double> v(nodes, 0.0), next(nodes);
  vf.values.push_back(v);
  vf.iterations_of_values.push_back(0);
  vf.stopping_threshold = mode.kind == IterationMode::Kind::Tolerance
                              ? (alpha > 0.0 ? mode.epsilon * (1.0 - alpha) / (2.0 * alpha) : kInf)
                              : 0.0;
  const std::size_t max_iter = mode.kind == IterationMode::Kind::Horizon ? mode.horizon : mode.max_iterations;
  std::vector<std::size_t> pol(nodes, 0);
  for (std::size_t k = 0; k < max_iter; ++k) {
    parallel_for(nodes, [&](std::size_t i) {
      const auto r = bellman_backup(mdp, alpha, v, i, all);
      next[i] = r.value;
      pol[i] = r.argmin.front();
    });
    vf.sup_diff.push_back(detail::value_gap(next, v));
    v.swap(next);
    if (mode.kind == IterationMode::Kind::Horizon) {
      vf.values.push_back(v);
      vf.iterations_of_values.push_back(k + 1);
      vf.greedy.push_back(pol);
    } else if (vf.sup_diff.back() <= vf.stopping_threshold) {
      vf.converged = true;
      break;
    }
  }
  if (mode.kind == IterationMode::Kind::Horizon) {
    vf.converged = true;
  } else {
    vf.values.push_back(next);  // v_{k-1}
    vf.values.push_back(v);
    vf.iterations_of_values.push_back(vf.sup_diff.size() - 1);
    vf.iterations_of_values.push_back(vf.sup_diff.size());
    vf.greedy.push_back(pol);
  }
  vf.policy = pol;
  return vf;
}

inline ValueFunction value_iteration(const StochasticControlModel& m, const CostSpec& cost, std::size_t N,
                                     const IterationMode& mode) {
  return value_iteration(build_belief_mdp(m, cost, N), cost.alpha, cost.mode, mode);
}

/// Optimal actions at an arbitrary finite belief against the final values.
inline std::vector<std::size_t> optimal_action_set(const ValueFunction& vf, const StochasticControlModel& m,
                                                   const CostSpec& cost, const std::vector<double>& z) {
  std::vector<std::size_t> all(m.finite->n_actions);
  std::iota(all.begin(), all.end(), std::size_t{0});
  // Horizon mode: first-stage actions of the T-step problem, greedy against
  // v_{T-1}. Tolerance mode: greedy against the final iterate.
  const bool horizon = vf.mode == "horizon" && vf.values.size() >= 2;
  const auto& prev = horizon ? vf.values[vf.values.size() - 2] : vf.final_values();
  return bellman_backup(m, cost, vf.alpha, prev, vf.grid, z, all).argmin;
}

inline json to_json(const ValueFunction& vf, bool all_values = false) {
  json nodes = json::array();
  for (std::size_t i = 0; i < vf.grid.size(); ++i) nodes.push_back(vf.grid.belief(i));
  json j = {{"mode", vf.mode},
            {"alpha", vf.alpha},
            {"grid", {{"n_states", vf.grid.n_states()}, {"resolution", vf.grid.resolution()}, {"mesh", vf.grid.mesh()}}},
            {"nodes", nodes},
            {"values", vf.final_values()},
            {"policy", vf.policy},
            {"sweeps", vf.sup_diff.size()},
            {"final_sup_diff", vf.sup_diff.empty() ? 0.0 : vf.sup_diff.back()},
            {"stopping_threshold", vf.stopping_threshold},
            {"converged", vf.converged},
            {"projection_error_bound", vf.projection_error_bound}};
  if (all_values) j["values_by_iteration"] = vf.values;
  return j;
}

inline void write_convergence_csv(std::ostream& os, const ValueFunction& vf) {
  os << "iteration,sup_diff\n";
  for (std::size_t k = 0; k < vf.sup_diff.size(); ++k) os << (k + 1) << ',' << format_number(vf.sup_diff[k]) << '\n';
}

// ---------------------------------------------------------------------------
// K-inf-compactness probe

enum class ProbeVerdict { Bounded, UnboundedWitness };

inline const char* to_string(ProbeVerdict v) { return v == ProbeVerdict::Bounded ? "bounded" : "unbounded_witness"; }

struct KinfProbeOptions {
  /// false: x stays in C (K-inf-compactness); true: C grows with the
  /// search shell (plain inf-compactness).
  bool grow_state_box = false;
  std::size_t starts_per_shell = 32;
  int max_doublings = 10;
  int refine_bisections = 30;
  std::uint64_t seed = 0;
};

struct KinfProbeReport {
  ProbeVerdict verdict = ProbeVerdict::Bounded;
  double initial_radius = 0.0;
  double max_radius_searched = 0.0;
  /// Largest shell radius carrying sublevel points (refined by bisection).
  double escape_radius = 0.0;
  std::vector<double> shell_radii;
  std::vector<double> shell_min_cost;
  std::optional<Vec> witness_x, witness_a, ray;
  double witness_cost = 0.0;
};

inline json to_json(const KinfProbeReport& r) {
  json j = {{"verdict", to_string(r.verdict)},
            {"initial_radius", r.initial_radius},
            {"max_radius_searched", r.max_radius_searched},
            {"escape_radius", r.escape_radius},
            {"shell_radii", r.shell_radii},
            {"shell_min_cost", r.shell_min_cost}};
  if (r.witness_x) {
    j["witness"] = {{"x", to_json_vec(*r.witness_x)}, {"a", to_json_vec(*r.witness_a)}, {"cost", r.witness_cost}};
  }
  if (r.ray) j["ray"] = to_json_vec(*r.ray);
  return j;
}

namespace detail {

struct ShellMin {
  double value = kInf;
  Vec x, a;
};

/// min of c over the shell. K mode: x in C, |a| = rho. Growing mode:
/// |(x, a)| = rho with x unconstrained.
inline ShellMin shell_minimum(const std::function<double(const Vec&, const Vec&)>& c, const Box& C, Eigen::Index l,
                              double rho, bool grow, std::size_t starts, Rng& rng, double stop_below = -kInf) {
  const Eigen::Index d = C.dim();
  const Eigen::Index n = d + l;
  auto split = [&](const Vec& v, Vec& x, Vec& a) {
    if (grow) {
      const Vec u = v / std::max(v.norm(), 1e-300) * rho;
      x = u.head(d);
      a = u.tail(l);
    } else {
      x = v.head(d).cwiseMax(C.lo).cwiseMin(C.hi);
      const Vec dir = v.tail(l);
      const double nr = dir.norm();
      a = nr > 0.0 ? Vec(dir / nr * rho) : Vec(Vec::Unit(l, 0) * rho);
    }
  };
  auto eval = [&](const Vec& v) {
    Vec x, a;
    split(v, x, a);
    const double val = c(x, a);
    return std::isnan(val) ? kInf : val;
  };
  ShellMin best;
  for (std::size_t s = 0; s < starts + 2 * static_cast<std::size_t>(l); ++s) {
    Vec v(n);
    if (s < 2 * static_cast<std::size_t>(l)) {
      // Axis directions for a, centre of C for x.
      v.setZero();
      if (!grow) v.head(d) = C.center();
      v[d + static_cast<Eigen::Index>(s / 2)] = s % 2 ? -1.0 : 1.0;
    } else {
      for (Eigen::Index j = 0; j < n; ++j) v[j] = standard_normal(rng);
      if (!grow)
        for (Eigen::Index j = 0; j < d; ++j) v[j] = C.lo[j] + (C.hi[j] - C.lo[j]) * uniform_open(rng);
    }
    double f = eval(v);
    // Compass search with step halving.
    double step = 0.5;
    while (step > 1e-7 && f > stop_below) {
      bool improved = false;
      for (Eigen::Index j = 0; j < n && !improved; ++j) {
        const double scale = (!grow && j < d) ? std::max(C.hi[j] - C.lo[j], 1e-12) : 1.0;
        for (double sgn : {1.0, -1.0}) {
          Vec t = v;
          t[j] += sgn * step * scale;
          if (!grow && j < d) t[j] = std::clamp(t[j], C.lo[j], C.hi[j]);
          const double ft = eval(t);
          if (ft < f) {
            v = t;
            // Keep the direction part at unit scale so step sizes stay meaningful.
            if (grow) v.normalize();
            else if (v.tail(l).norm() > 0.0) v.tail(l).normalize();
            f = ft;
            improved = true;
            break;
          }
        }
      }
      if (!improved) step *= 0.5;
    }
    if (f < best.value) {
      best.value = f;
      split(v, best.x, best.a);
    }
    if (best.value <= stop_below) break;
  }
  return best;
}

}  // namespace detail

/// Searches for sublevel points {c <= gamma} escaping to infinity in the
/// action (or joint) variable along doubling shells rho0 * 2^k.
inline KinfProbeReport kinf_compact_probe(const CostSpec& cost, const Box& C, double gamma, const Box& search_box,
                                          const KinfProbeOptions& opt = {}) {
  require(C.dim() >= 1 && search_box.dim() >= 1, "kinf_compact_probe: empty boxes");
  require((C.hi.array() >= C.lo.array()).all(), "kinf_compact_probe: invalid state box");
  const Eigen::Index l = search_box.dim();
  KinfProbeReport rep;
  double rho0 = std::max(search_box.lo.cwiseAbs().maxCoeff(), search_box.hi.cwiseAbs().maxCoeff());
  if (opt.grow_state_box) rho0 = std::max(rho0, std::max(C.lo.cwiseAbs().maxCoeff(), C.hi.cwiseAbs().maxCoeff()));
  rho0 = std::max(rho0, 1e-6);
  rep.initial_radius = rho0;
  Rng rng = make_rng(derive_seed(opt.seed, 0x4b1ULL));

  int last_hit = -1;
  detail::ShellMin last_hit_min;
  for (int k = 0; k <= opt.max_doublings; ++k) {
    const double rho = std::ldexp(rho0, k);
    const auto sm = detail::shell_minimum(cost.c, C, l, rho, opt.grow_state_box, opt.starts_per_shell, rng);
    rep.shell_radii.push_back(rho);
    rep.shell_min_cost.push_back(sm.value);
    rep.max_radius_searched = rho;
    if (sm.value <= gamma) {
      last_hit = k;
      last_hit_min = sm;
    }
  }
  if (last_hit == opt.max_doublings) {
    rep.verdict = ProbeVerdict::UnboundedWitness;
    rep.witness_x = last_hit_min.x;
    rep.witness_a = last_hit_min.a;
    rep.witness_cost = last_hit_min.value;
    const Vec v = opt.grow_state_box ? concat(last_hit_min.x, last_hit_min.a) : last_hit_min.a;
    rep.ray = Vec(v / v.norm());
    rep.escape_radius = kInf;
    return rep;
  }
  rep.verdict = ProbeVerdict::Bounded;
  // Bisect between the last shell with sublevel points and the next one.
  double lo = last_hit >= 0 ? std::ldexp(rho0, last_hit) : 0.0;
  double hi = last_hit >= 0 ? std::ldexp(rho0, last_hit + 1) : rho0;
  if (last_hit >= 0) {
    rep.witness_x = last_hit_min.x;
    rep.witness_a = last_hit_min.a;
    rep.witness_cost = last_hit_min.value;
  }
  for (int b = 0; b < opt.refine_bisections; ++b) {
    const double mid = 0.5 * (lo + hi);
    const auto sm = detail::shell_minimum(cost.c, C, l, mid, opt.grow_state_box, opt.starts_per_shell / 4 + 1, rng, gamma);
    if (sm.value <= gamma) lo = mid;
    else hi = mid;
  }
  rep.escape_radius = lo;
  return rep;
}

/// sqrt(gamma / lambda_min(A)) for the quadratic family with A positive
/// definite and X PSD.
inline double quadratic_action_radius_bound(const Mat& A, double gamma) {
  const double lam = min_eigenvalue(A);
  require(lam > 0.0, "quadratic bound needs A positive definite");
  return std::sqrt(std::max(0.0, gamma) / lam);
}

/// (gamma + |X|_2 r) / sigma_min(A) for the estimation family, C in the
/// ball of radius r.
inline double estimation_action_radius_bound(const Mat& X, const Mat& A, double gamma, double r) {
  Eigen::JacobiSVD<Mat> sx(X), sa(A);
  const double smin = sa.singularValues().minCoeff();
  require(smin > 0.0, "estimation bound needs A nonsingular");
  return (gamma + sx.singularValues().maxCoeff() * r) / smin;
}

// ---------------------------------------------------------------------------
// Policy simulation

struct EpisodeStats {
  double mean = 0.0;
  double band = 0.0;  ///< 3 standard errors
  std::vector<double> costs;
  std::size_t excluded = 0;
};

inline json to_json(const EpisodeStats& s) {
  return {{"mean", s.mean}, {"band_3sigma", s.band}, {"episodes", s.costs.size()}, {"excluded", s.excluded}};
}

/// Seeded rollouts with the filter in the loop. Episode e draws everything
/// from derive_seed(seed, e), so two policies on the same seed see the same
/// noise (paired comparison).
inline EpisodeStats simulate_policy(const StochasticControlModel& m, const CostSpec& cost, const ActionRule& policy,
                                    std::size_t horizon, double alpha, std::uint64_t seed, std::size_t n_episodes,
                                    std::size_t n_particles = 500) {
  EpisodeStats st;
  std::vector<double> costs(n_episodes, 0.0);
  std::vector<char> bad(n_episodes, 0);
  parallel_for(n_episodes, [&](std::size_t e) {
    const std::uint64_t es = derive_seed(seed, e);
    Rng rng = make_rng(es);
    Vec x = sample_belief(m.p0, rng);
    Belief z = initial_belief(m, n_particles, es);
    double total = 0.0, disc = 1.0;
    Vec xi, eta;
    try {
      for (std::size_t t = 0; t < horizon; ++t) {
        const Vec a = policy(t, z);
        const double c = cost(x, a);
        total += (c == 0.0 ? 0.0 : disc * c);
        m.mu.draw(rng, xi);
        m.nu.draw(rng, eta);
        const Vec xn = step_state(m, x, a, xi);
        const Vec y = emit_observation(m, x, a, xn, eta);
        if (t + 1 < horizon) {
          FilterOptions fo;
          fo.seed = derive_seed(es, 0x30000ULL + t);
          z = bayes_update(m, z, a, y, fo).posterior;
        }
        x = xn;
        disc *= alpha;
      }
      costs[e] = total;
    } catch (const DegenerateUpdate&) {
      bad[e] = 1;
    }
  });
  for (std::size_t e = 0; e < n_episodes; ++e) {
    if (bad[e]) ++st.excluded;
    else st.costs.push_back(costs[e]);
  }
  if (!st.costs.empty()) {
    const double n = static_cast<double>(st.costs.size());
    double s = 0.0, q = 0.0;
    for (double c : st.costs) s += c;
    st.mean = s / n;
    for (double c : st.costs) q += (c - st.mean) * (c - st.mean);
    st.band = n > 1 ? 3.0 * std::sqrt(q / (n - 1) / n) : 0.0;
  }
  return st;
}

/// Stationary grid policy as an action rule (nearest-node lookup).
inline ActionRule grid_policy(const ValueFunction& vf) {
  return [&vf](std::size_t, const Belief& z) {
    const auto& f = std::get<FiniteBelief>(z);
    return index_vec(vf.policy[vf.grid.project(f.weights)]);
  };
}

/// Time-indexed policy of a horizon-mode value function.
inline ActionRule markov_grid_policy(const ValueFunction& vf) {
  return [&vf](std::size_t t, const Belief& z) {
    const auto& f = std::get<FiniteBelief>(z);
    return index_vec(vf.markov_action(t, vf.grid.project(f.weights)));
  };
}

}  // namespace beliefmdp
