#pragma once

#include "beliefmdp/belief.hpp"
#include "beliefmdp/noise.hpp"

#include <optional>
#include <string>
#include <variant>

namespace beliefmdp {

enum class Flavor { POMDP, POMDP1 };

inline const char* to_string(Flavor f) { return f == Flavor::POMDP ? "POMDP" : "POMDP1"; }
inline Flavor flavor_from_string(const std::string& s) {
  if (s == "POMDP") return Flavor::POMDP;
  if (s == "POMDP1") return Flavor::POMDP1;
  throw InvalidArgument("unknown flavor '" + s + "'");
}

/// x' = F(x, a, xi)
using TransitionMap = std::function<Vec(const Vec& x, const Vec& a, const Vec& xi)>;
/// y' = G(a, x', eta)
using NextStateObservation = std::function<Vec(const Vec& a, const Vec& x_next, const Vec& eta)>;
/// y' = G1(x, a, eta)
using CurrentStateObservation = std::function<Vec(const Vec& x, const Vec& a, const Vec& eta)>;
/// y0 = G0(x0, eta)
using InitialObservation = std::function<Vec(const Vec& x, const Vec& eta)>;

struct NextState {
  NextStateObservation G;
};
struct CurrentState {
  CurrentStateObservation G1;
};
using ObservationMap = std::variant<NextState, CurrentState>;

/// Exact probability tables of a finite POMDP. States, actions and
/// observations are indices, encoded in the continuous API as 1-vectors.
struct FiniteTables {
  std::size_t n_states = 0;
  std::size_t n_actions = 0;
  std::size_t n_obs = 0;
  std::vector<Mat> transition;   ///< transition[a](x, x')
  std::vector<Mat> observation;  ///< observation[a](x', y) for POMDP, (x, y) for POMDP1
  Mat cost;                      ///< cost(x, a); empty when the model carries no cost
  std::vector<std::string> action_labels;

  void validate() const {
    require(n_states > 0 && n_actions > 0 && n_obs > 0, "finite tables: empty dimension");
    require(transition.size() == n_actions && observation.size() == n_actions,
            "finite tables: one transition and one observation matrix per action");
    for (std::size_t a = 0; a < n_actions; ++a) {
      const Mat& t = transition[a];
      const Mat& q = observation[a];
      require(t.rows() == static_cast<Eigen::Index>(n_states) && t.cols() == static_cast<Eigen::Index>(n_states),
              "finite tables: transition shape");
      require(q.rows() == static_cast<Eigen::Index>(n_states) && q.cols() == static_cast<Eigen::Index>(n_obs),
              "finite tables: observation shape");
      for (Eigen::Index r = 0; r < t.rows(); ++r) {
        require((t.row(r).array() >= 0.0).all() && std::abs(t.row(r).sum() - 1.0) <= 1e-12,
                "finite tables: transition row is not a distribution");
        require((q.row(r).array() >= 0.0).all() && std::abs(q.row(r).sum() - 1.0) <= 1e-12,
                "finite tables: observation row is not a distribution");
      }
    }
    if (cost.size() > 0) {
      require(cost.rows() == static_cast<Eigen::Index>(n_states) && cost.cols() == static_cast<Eigen::Index>(n_actions),
              "finite tables: cost shape");
    }
  }
};

/// x' = F1 x + F2 a + xi,  y' = G x' + eta, Gaussian noises.
struct LinearGaussian {
  Mat F1, F2, G;
  Vec xi_mean, eta_mean;
  Mat xi_cov, eta_cov;
};

/// Structural tag of a map in the noise argument; used by diagnostics.
enum class NoiseForm { Additive, Multiplicative, General };

inline const char* to_string(NoiseForm f) {
  switch (f) {
    case NoiseForm::Additive: return "additive";
    case NoiseForm::Multiplicative: return "multiplicative";
    default: return "general";
  }
}

/// The tuple (F, G or G1, G0, mu, nu, p0) with dimensions and flavor.
struct StochasticControlModel {
  std::string name = "custom";
  json params = json::object();
  Eigen::Index state_dim = 0;
  Eigen::Index obs_dim = 0;
  Eigen::Index action_dim = 0;
  Eigen::Index state_noise_dim = 0;
  Eigen::Index obs_noise_dim = 0;
  Flavor flavor = Flavor::POMDP;

  TransitionMap F;
  ObservationMap observation;
  InitialObservation G0;  ///< optional; simulation only
  NoiseDistribution mu;
  NoiseDistribution nu;
  Belief p0 = FiniteBelief{};

  NoiseForm transition_form = NoiseForm::General;
  NoiseForm observation_form = NoiseForm::General;

  std::optional<FiniteTables> finite;
  std::optional<LinearGaussian> linear;

  /// Free-form flags: "compliant", "failure_mode", expectations of the
  /// diagnostics. Counterexamples are non-compliant.
  json metadata = json::object();

  bool is_finite() const { return finite.has_value(); }
  bool is_linear() const { return linear.has_value(); }

  void validate() const {
    require(state_dim > 0 && obs_dim > 0 && action_dim > 0 && state_noise_dim > 0 && obs_noise_dim > 0,
            "model '" + name + "': all dimensions must be positive");
    require(static_cast<bool>(F), "model '" + name + "': missing transition map");
    require(mu.dim() == state_noise_dim, "model '" + name + "': mu dimension differs from state_noise_dim");
    require(nu.dim() == obs_noise_dim, "model '" + name + "': nu dimension differs from obs_noise_dim");
    const bool next = std::holds_alternative<NextState>(observation);
    if (flavor == Flavor::POMDP) require(next, "model '" + name + "': POMDP flavor requires a next-state observation map");
    else require(!next, "model '" + name + "': POMDP1 flavor requires a current-state observation map");
    if (next) require(static_cast<bool>(std::get<NextState>(observation).G), "missing observation map");
    else require(static_cast<bool>(std::get<CurrentState>(observation).G1), "missing observation map");
    if (finite) finite->validate();
    if (!std::holds_alternative<FiniteBelief>(p0) || !std::get<FiniteBelief>(p0).weights.empty()) {
      beliefmdp::validate(p0);
      require(belief_dim(p0) == state_dim, "model '" + name + "': p0 dimension differs from state_dim");
    }
  }
};

namespace detail {
inline Vec checked(Vec v, Eigen::Index n, const char* what) {
  require_dim(v, n, what);
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) throw NumericFailure(std::string(what) + " produced a non-finite value", json{{"value", to_json_vec(v)}});
  }
  return v;
}
}  // namespace detail

/// F(x, a, xi).
inline Vec step_state(const StochasticControlModel& m, const Vec& x, const Vec& a, const Vec& xi) {
  require_dim(x, m.state_dim, "state");
  require_dim(a, m.action_dim, "action");
  require_dim(xi, m.state_noise_dim, "state noise");
  return detail::checked(m.F(x, a, xi), m.state_dim, "transition map");
}

/// G(a, x', eta); POMDP flavor only.
inline Vec observe(const StochasticControlModel& m, const Vec& a, const Vec& x_next, const Vec& eta) {
  const auto* g = std::get_if<NextState>(&m.observation);
  if (!g) throw InvalidArgument("observe: model '" + m.name + "' is POMDP1; use observe1");
  require_dim(a, m.action_dim, "action");
  require_dim(x_next, m.state_dim, "next state");
  require_dim(eta, m.obs_noise_dim, "observation noise");
  return detail::checked(g->G(a, x_next, eta), m.obs_dim, "observation map");
}

/// G1(x, a, eta); POMDP1 flavor only.
inline Vec observe1(const StochasticControlModel& m, const Vec& x, const Vec& a, const Vec& eta) {
  const auto* g = std::get_if<CurrentState>(&m.observation);
  if (!g) throw InvalidArgument("observe1: model '" + m.name + "' is POMDP; use observe");
  require_dim(x, m.state_dim, "state");
  require_dim(a, m.action_dim, "action");
  require_dim(eta, m.obs_noise_dim, "observation noise");
  return detail::checked(g->G1(x, a, eta), m.obs_dim, "observation map");
}

/// Next observation for either flavor: G(a, x', eta) or G1(x, a, eta).
inline Vec emit_observation(const StochasticControlModel& m, const Vec& x, const Vec& a, const Vec& x_next,
                            const Vec& eta) {
  return m.flavor == Flavor::POMDP ? observe(m, a, x_next, eta) : observe1(m, x, a, eta);
}

/// Initial observation y0 = G0(x0, eta); falls back to the main observation
/// map with a zero action when G0 is not supplied.
inline Vec observe0(const StochasticControlModel& m, const Vec& x0, const Vec& eta) {
  require_dim(x0, m.state_dim, "state");
  if (m.G0) return detail::checked(m.G0(x0, eta), m.obs_dim, "initial observation map");
  const Vec a0 = Vec::Zero(m.action_dim);
  return emit_observation(m, x0, a0, x0, eta);
}

inline std::size_t as_index(const Vec& v, std::size_t bound, const char* what) {
  require(v.size() == 1, std::string(what) + " index must be a 1-vector");
  const double r = std::round(v[0]);
  if (!(r >= 0.0 && r < static_cast<double>(bound) && std::abs(r - v[0]) < 1e-9))
    throw InvalidArgument(std::string(what) + " index out of range", json{{"value", v[0]}, {"bound", bound}});
  return static_cast<std::size_t>(r);
}

inline Vec index_vec(std::size_t i) { return Vec::Constant(1, static_cast<double>(i)); }

/// Inverse-CDF pick of an index from a probability row at level u in (0,1).
inline std::size_t quantile_index(const Eigen::Ref<const Eigen::RowVectorXd>& row, double u) {
  double acc = 0.0;
  const auto n = static_cast<std::size_t>(row.size());
  for (std::size_t i = 0; i + 1 < n; ++i) {
    acc += row[static_cast<Eigen::Index>(i)];
    if (u < acc) return i;
  }
  // Skip trailing zero-probability outcomes.
  std::size_t last = n - 1;
  while (last > 0 && row[static_cast<Eigen::Index>(last)] == 0.0) --last;
  return last;
}

/// Wraps exact tables as stochastic equations driven by Uniform(0,1)
/// noises: F(x, a, xi) is the xi-quantile of T(.|x, a), likewise for G.
inline StochasticControlModel finite_model(FiniteTables tables, Flavor flavor, std::vector<double> p0,
                                           std::string name = "finite_tables") {
  tables.validate();
  StochasticControlModel m;
  m.name = std::move(name);
  m.state_dim = m.obs_dim = m.action_dim = m.state_noise_dim = m.obs_noise_dim = 1;
  m.flavor = flavor;
  const auto tab = std::make_shared<const FiniteTables>(tables);
  m.F = [tab](const Vec& x, const Vec& a, const Vec& xi) {
    const auto xs = as_index(x, tab->n_states, "state");
    const auto as = as_index(a, tab->n_actions, "action");
    return index_vec(quantile_index(tab->transition[as].row(static_cast<Eigen::Index>(xs)), xi[0]));
  };
  auto obs = [tab](std::size_t as, std::size_t xs, double u) {
    return index_vec(quantile_index(tab->observation[as].row(static_cast<Eigen::Index>(xs)), u));
  };
  if (flavor == Flavor::POMDP) {
    m.observation = NextState{[tab, obs](const Vec& a, const Vec& xn, const Vec& eta) {
      return obs(as_index(a, tab->n_actions, "action"), as_index(xn, tab->n_states, "state"), eta[0]);
    }};
  } else {
    m.observation = CurrentState{[tab, obs](const Vec& x, const Vec& a, const Vec& eta) {
      return obs(as_index(a, tab->n_actions, "action"), as_index(x, tab->n_states, "state"), eta[0]);
    }};
  }
  m.mu = NoiseDistribution::uniform(Vec::Zero(1), Vec::Ones(1));
  m.nu = NoiseDistribution::uniform(Vec::Zero(1), Vec::Ones(1));
  if (p0.empty()) p0.assign(tables.n_states, 1.0 / static_cast<double>(tables.n_states));
  m.p0 = FiniteBelief::over_indices(std::move(p0));
  m.finite = std::move(tables);
  m.metadata = {{"compliant", true}, {"finite", true}};
  m.validate();
  return m;
}

inline FiniteTables finite_tables_from_json(const json& j) {
  FiniteTables t;
  t.n_states = j.at("n_states").get<std::size_t>();
  t.n_actions = j.at("n_actions").get<std::size_t>();
  t.n_obs = j.at("n_obs").get<std::size_t>();
  for (const auto& m : j.at("transition")) t.transition.push_back(mat_from_json(m));
  for (const auto& m : j.at("observation")) t.observation.push_back(mat_from_json(m));
  if (j.contains("cost")) t.cost = mat_from_json(j.at("cost"));
  if (j.contains("action_labels")) t.action_labels = j.at("action_labels").get<std::vector<std::string>>();
  t.validate();
  return t;
}

inline json to_json(const FiniteTables& t) {
  json tr = json::array(), ob = json::array();
  for (const auto& m : t.transition) tr.push_back(to_json_mat(m));
  for (const auto& m : t.observation) ob.push_back(to_json_mat(m));
  json j = {{"n_states", t.n_states}, {"n_actions", t.n_actions}, {"n_obs", t.n_obs},
            {"transition", tr},       {"observation", ob}};
  if (t.cost.size() > 0) j["cost"] = to_json_mat(t.cost);
  if (!t.action_labels.empty()) j["action_labels"] = t.action_labels;
  return j;
}

}  // namespace beliefmdp
