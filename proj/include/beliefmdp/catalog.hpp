#pragma once

// Built-in models, referenced by name from configs.

#include "beliefmdp/diffeo.hpp"
#include "beliefmdp/kernel.hpp"

namespace beliefmdp {

namespace detail {

inline Eigen::Index dim_param(json& params, const char* key, Eigen::Index def) {
  if (!params.contains(key)) params[key] = def;
  const auto v = params.at(key).get<long long>();
  if (v < 1) throw InvalidArgument(std::string("parameter '") + key + "' must be a positive integer");
  return static_cast<Eigen::Index>(v);
}

inline double scalar_param(json& params, const char* key, double def) {
  if (!params.contains(key)) params[key] = def;
  if (!params.at(key).is_number()) throw InvalidArgument(std::string("parameter '") + key + "' must be a number");
  return params.at(key).get<double>();
}

/// Matrix parameter: a number means that number times the (rectangular)
/// identity, a flat list the diagonal, a nested list the full matrix.
inline Mat mat_param(json& params, const char* key, Eigen::Index rows, Eigen::Index cols, double def) {
  if (!params.contains(key)) params[key] = def;
  const json& j = params.at(key);
  Mat m;
  if (j.is_number()) {
    m = j.get<double>() * Mat::Identity(rows, cols);
  } else {
    m = mat_from_json(j, rows == cols);
  }
  if (m.rows() != rows || m.cols() != cols) {
    throw InvalidArgument(std::string("parameter '") + key + "' has shape " + std::to_string(m.rows()) + "x" +
                          std::to_string(m.cols()) + ", expected " + std::to_string(rows) + "x" +
                          std::to_string(cols));
  }
  params[key] = to_json_mat(m);
  return m;
}

inline Vec vec_param(json& params, const char* key, Eigen::Index n, double def) {
  if (!params.contains(key)) params[key] = def;
  const json& j = params.at(key);
  Vec v = j.is_number() ? Vec(Vec::Constant(n, j.get<double>())) : vec_from_json(j);
  if (v.size() != n) throw InvalidArgument(std::string("parameter '") + key + "' has the wrong length");
  params[key] = to_json_vec(v);
  return v;
}

inline Mat cov_param(json& params, const char* key, Eigen::Index n, double def) {
  Mat c = mat_param(params, key, n, n, def);
  if (!is_psd(c)) throw InvalidArgument(std::string("parameter '") + key + "' is not a PSD covariance", json{{key, to_json_mat(c)}});
  return c;
}

inline void check_known(const json& params, std::initializer_list<const char*> known, const std::string& name) {
  for (auto it = params.begin(); it != params.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) throw InvalidArgument("model '" + name + "': unknown parameter '" + it.key() + "'");
  }
}

inline void additive_observation(StochasticControlModel& m) {
  m.observation = NextState{[](const Vec&, const Vec& xn, const Vec& eta) { return Vec(xn + eta); }};
  m.observation_form = NoiseForm::Additive;
}

/// The two-state, two-action, two-observation test POMDP.
inline json fixture_two_state_tables() {
  return json{{"n_states", 2},
              {"n_actions", 2},
              {"n_obs", 2},
              {"transition", {{{0.9, 0.1}, {0.2, 0.8}}, {{0.5, 0.5}, {0.5, 0.5}}}},
              {"observation", {{{0.8, 0.2}, {0.3, 0.7}}, {{0.6, 0.4}, {0.4, 0.6}}}},
              {"cost", {{1.0, 1.5}, {3.0, 1.5}}},
              {"action_labels", {"wait", "reset"}}};
}

}  // namespace detail

inline const std::vector<std::string>& catalog_names() {
  static const std::vector<std::string> names = {"lssm",
                                                 "inventory_backorder",
                                                 "inventory_lost_sales",
                                                 "additive_nonlinear",
                                                 "multiplicative_nonlinear",
                                                 "arctan_example",
                                                 "delta_noise_counterexample",
                                                 "singular_gaussian_counterexample",
                                                 "finite_tables",
                                                 "pomdp1_point_observation"};
  return names;
}

/// Builds a catalog model. Missing parameters take their defaults and the
/// resolved set is stored in model.params.
inline StochasticControlModel catalog_model(const std::string& name, json params = json::object()) {
  using namespace detail;
  if (params.is_null()) params = json::object();
  if (!params.is_object()) throw InvalidArgument("model parameters must be a JSON object");
  StochasticControlModel m;
  m.name = name;
  m.metadata = {{"compliant", true}};

  if (name == "lssm") {
    check_known(params, {"d", "m", "l", "F1", "F2", "G", "xi_mean", "xi_cov", "eta_mean", "eta_cov", "p0_mean", "p0_cov"},
                name);
    const auto d = dim_param(params, "d", 1), mo = dim_param(params, "m", 1), l = dim_param(params, "l", 1);
    LinearGaussian lin;
    lin.F1 = mat_param(params, "F1", d, d, 0.9);
    lin.F2 = mat_param(params, "F2", d, l, 1.0);
    lin.G = mat_param(params, "G", mo, d, 1.0);
    lin.xi_mean = vec_param(params, "xi_mean", d, 0.0);
    lin.eta_mean = vec_param(params, "eta_mean", mo, 0.0);
    lin.xi_cov = cov_param(params, "xi_cov", d, 1.0);
    lin.eta_cov = cov_param(params, "eta_cov", mo, 0.25);
    const Vec p0m = vec_param(params, "p0_mean", d, 0.0);
    const Mat p0c = cov_param(params, "p0_cov", d, 1.0);
    m.state_dim = m.state_noise_dim = d;
    m.obs_dim = m.obs_noise_dim = mo;
    m.action_dim = l;
    m.F = [F1 = lin.F1, F2 = lin.F2](const Vec& x, const Vec& a, const Vec& xi) { return Vec(F1 * x + F2 * a + xi); };
    m.observation = NextState{[G = lin.G](const Vec&, const Vec& xn, const Vec& eta) { return Vec(G * xn + eta); }};
    m.mu = NoiseDistribution::gaussian(lin.xi_mean, lin.xi_cov);
    m.nu = NoiseDistribution::gaussian(lin.eta_mean, lin.eta_cov);
    m.p0 = GaussianBelief{p0m, p0c};
    m.transition_form = NoiseForm::Additive;
    m.observation_form = NoiseForm::Additive;
    m.linear = std::move(lin);
  } else if (name == "inventory_backorder" || name == "inventory_lost_sales") {
    check_known(params, {"d", "demand_lo", "demand_hi", "obs_sd", "initial_stock"}, name);
    const auto d = dim_param(params, "d", 1);
    const double lo = scalar_param(params, "demand_lo", 0.0), hi = scalar_param(params, "demand_hi", 1.0);
    const double sd = scalar_param(params, "obs_sd", 0.1);
    const double x0 = scalar_param(params, "initial_stock", 1.0);
    if (!(lo >= 0.0 && hi > lo)) throw InvalidArgument("inventory: demand range must satisfy 0 <= demand_lo < demand_hi");
    if (!(sd > 0.0)) throw InvalidArgument("inventory: obs_sd must be positive");
    m.state_dim = m.obs_dim = m.action_dim = m.state_noise_dim = m.obs_noise_dim = d;
    const bool lost = name == "inventory_lost_sales";
    m.F = [lost](const Vec& x, const Vec& a, const Vec& xi) {
      Vec v = x + a - xi;
      if (lost) v = v.cwiseMax(0.0);
      return v;
    };
    additive_observation(m);
    m.mu = NoiseDistribution::uniform(Vec::Constant(d, lo), Vec::Constant(d, hi));
    m.nu = NoiseDistribution::gaussian(Vec::Zero(d), sd * sd * Mat::Identity(d, d));
    m.p0 = FiniteBelief::point_mass(Vec::Constant(d, x0));
    m.transition_form = lost ? NoiseForm::General : NoiseForm::Additive;
    if (lost) {
      // max(0, .) collapses a set of demands of positive measure onto 0.
      m.metadata["transition_diffeomorphic"] = false;
      m.metadata["note"] = "transition has an atom at 0; the additive observation noise carries the continuity";
    } else {
      m.metadata["transition_diffeomorphic"] = true;
    }
  } else if (name == "additive_nonlinear") {
    check_known(params, {"d", "xi_sd", "eta_sd"}, name);
    const auto d = dim_param(params, "d", 1);
    const double xs = scalar_param(params, "xi_sd", 1.0), es = scalar_param(params, "eta_sd", 0.5);
    if (!(xs > 0.0 && es > 0.0)) throw InvalidArgument("additive_nonlinear: noise scales must be positive");
    m.state_dim = m.obs_dim = m.action_dim = m.state_noise_dim = m.obs_noise_dim = d;
    m.F = [](const Vec& x, const Vec& a, const Vec& xi) {
      return Vec(0.5 * x + x.array().sin().matrix() + a + xi);
    };
    additive_observation(m);
    m.mu = NoiseDistribution::gaussian(Vec::Zero(d), xs * xs * Mat::Identity(d, d));
    m.nu = NoiseDistribution::gaussian(Vec::Zero(d), es * es * Mat::Identity(d, d));
    m.p0 = GaussianBelief{Vec::Zero(d), Mat::Identity(d, d)};
    m.transition_form = NoiseForm::Additive;
  } else if (name == "multiplicative_nonlinear") {
    check_known(params, {"d", "xi_sd", "eta_sd"}, name);
    const auto d = dim_param(params, "d", 1);
    const double xs = scalar_param(params, "xi_sd", 0.1), es = scalar_param(params, "eta_sd", 0.1);
    if (!(xs > 0.0 && es > 0.0)) throw InvalidArgument("multiplicative_nonlinear: noise scales must be positive");
    m.state_dim = m.obs_dim = m.action_dim = m.state_noise_dim = m.obs_noise_dim = d;
    // F = diag(xi) f(x, a), G = diag(eta) g(x'), with f, g >= 1.
    m.F = [](const Vec& x, const Vec& a, const Vec& xi) {
      const Vec f = (1.0 + 0.5 * x.array().square() + a.array().square()).matrix();
      return Vec(xi.cwiseProduct(f));
    };
    m.observation = NextState{[](const Vec&, const Vec& xn, const Vec& eta) {
      return Vec(eta.cwiseProduct((1.0 + xn.array().square()).matrix()));
    }};
    m.mu = NoiseDistribution::gaussian(Vec::Ones(d), xs * xs * Mat::Identity(d, d));
    m.nu = NoiseDistribution::gaussian(Vec::Ones(d), es * es * Mat::Identity(d, d));
    m.p0 = GaussianBelief{Vec::Zero(d), Mat::Identity(d, d)};
    m.transition_form = NoiseForm::Multiplicative;
    m.observation_form = NoiseForm::Multiplicative;
  } else if (name == "arctan_example") {
    check_known(params, {"xi_sd", "eta_sd"}, name);
    const double xs = scalar_param(params, "xi_sd", 1.0), es = scalar_param(params, "eta_sd", 0.5);
    if (!(xs > 0.0 && es > 0.0)) throw InvalidArgument("arctan_example: noise scales must be positive");
    m.state_dim = m.obs_dim = m.action_dim = m.state_noise_dim = m.obs_noise_dim = 1;
    m.F = [](const Vec& x, const Vec& a, const Vec& xi) {
      return Vec::Constant(1, (x[0] * x[0] + 1.0) * (a[0] * a[0] + 1.0) * std::atan(xi[0])).eval();
    };
    additive_observation(m);
    m.mu = NoiseDistribution::gaussian(Vec::Zero(1), xs * xs * Mat::Identity(1, 1));
    m.nu = NoiseDistribution::gaussian(Vec::Zero(1), es * es * Mat::Identity(1, 1));
    m.p0 = GaussianBelief{Vec::Zero(1), Mat::Identity(1, 1)};
    m.metadata["image_varies_with_state"] = true;
  } else if (name == "delta_noise_counterexample") {
    check_known(params, {}, name);
    m.state_dim = m.obs_dim = m.action_dim = m.state_noise_dim = m.obs_noise_dim = 1;
    m.F = [](const Vec& x, const Vec& a, const Vec& xi) { return Vec(x + a + xi); };
    additive_observation(m);
    m.mu = NoiseDistribution::point_mass(Vec::Zero(1));
    m.nu = NoiseDistribution::point_mass(Vec::Zero(1));
    m.p0 = FiniteBelief::point_mass(Vec::Zero(1));
    m.transition_form = NoiseForm::Additive;
    m.metadata = {{"compliant", false}, {"failure_mode", "point_mass_noise_without_density"},
                  {"expected_tv", "discontinuous"}};
  } else if (name == "singular_gaussian_counterexample") {
    check_known(params, {}, name);
    m.state_dim = m.obs_dim = m.state_noise_dim = m.obs_noise_dim = 2;
    m.action_dim = 1;
    Mat cov(2, 2);
    cov << 1.0, 1.0, 1.0, 1.0;
    const Vec z = (Vec(2) << 1.0, -1.0).finished() / std::sqrt(2.0);
    // The law lives on the line span{(1,1)}; the action moves it along z.
    m.F = [z](const Vec& x, const Vec& a, const Vec& xi) { return Vec(x + a[0] * z + xi); };
    additive_observation(m);
    m.mu = NoiseDistribution::gaussian(Vec::Zero(2), cov);
    m.nu = NoiseDistribution::gaussian(Vec::Zero(2), 0.25 * Mat::Identity(2, 2));
    m.p0 = FiniteBelief::point_mass(Vec::Zero(2));
    m.transition_form = NoiseForm::Additive;
    m.metadata = {{"compliant", false}, {"failure_mode", "singular_noise_without_density"},
                  {"expected_tv", "discontinuous"}};
  } else if (name == "finite_tables") {
    check_known(params, {"tables", "flavor", "p0"}, name);
    if (!params.contains("tables")) params["tables"] = fixture_two_state_tables();
    if (!params.contains("flavor")) params["flavor"] = "POMDP";
    const FiniteTables t = finite_tables_from_json(params.at("tables"));
    std::vector<double> p0 = params.contains("p0") ? params.at("p0").get<std::vector<double>>() : std::vector<double>{};
    if (p0.empty()) p0.assign(t.n_states, 1.0 / static_cast<double>(t.n_states));
    params["p0"] = p0;
    auto fm = finite_model(t, flavor_from_string(params.at("flavor").get<std::string>()), p0, name);
    fm.params = params;
    return fm;
  } else if (name == "pomdp1_point_observation") {
    check_known(params, {"xi_sd"}, name);
    const double xs = scalar_param(params, "xi_sd", 1.0);
    if (!(xs > 0.0)) throw InvalidArgument("pomdp1_point_observation: xi_sd must be positive");
    m.state_dim = m.obs_dim = m.action_dim = m.state_noise_dim = m.obs_noise_dim = 1;
    m.flavor = Flavor::POMDP1;
    m.F = [](const Vec& x, const Vec& a, const Vec& xi) { return Vec(0.5 * x + a + xi); };
    m.observation = CurrentState{[](const Vec& x, const Vec&, const Vec& eta) { return Vec(x + eta); }};
    m.mu = NoiseDistribution::gaussian(Vec::Zero(1), xs * xs * Mat::Identity(1, 1));
    m.nu = NoiseDistribution::point_mass(Vec::Zero(1));
    m.p0 = GaussianBelief{Vec::Zero(1), Mat::Identity(1, 1)};
    m.transition_form = NoiseForm::Additive;
    m.observation_form = NoiseForm::Additive;
    m.metadata = {{"compliant", false}, {"failure_mode", "observation_kernel_not_tv_continuous"},
                  {"expected_feller", "fails"}};
  } else {
    json known = catalog_names();
    throw InvalidArgument("unknown catalog model '" + name + "'", json{{"known", known}});
  }
  m.params = std::move(params);
  m.validate();
  return m;
}

/// {name, dims, flavor, params, noise: {mu, nu}, p0, metadata}. Maps are
/// referenced by the catalog name.
inline json to_json(const StochasticControlModel& m) {
  return {{"name", m.name},
          {"dims",
           {{"state", m.state_dim},
            {"obs", m.obs_dim},
            {"action", m.action_dim},
            {"state_noise", m.state_noise_dim},
            {"obs_noise", m.obs_noise_dim}}},
          {"flavor", to_string(m.flavor)},
          {"params", m.params},
          {"noise", {{"mu", m.mu.to_json()}, {"nu", m.nu.to_json()}}},
          {"p0", to_json(m.p0)},
          {"forms", {{"transition", to_string(m.transition_form)}, {"observation", to_string(m.observation_form)}}},
          {"metadata", m.metadata}};
}

/// Rebuilds a model from {name, params}; other fields are checked for
/// consistency when present.
inline StochasticControlModel model_from_json(const json& j) {
  if (!j.is_object() || !j.contains("name")) throw InvalidArgument("model JSON needs a 'name'");
  auto m = catalog_model(j.at("name").get<std::string>(), j.value("params", json::object()));
  if (j.contains("flavor") && j.at("flavor").get<std::string>() != to_string(m.flavor))
    throw InvalidArgument("model JSON: flavor does not match the catalog entry");
  if (j.contains("dims")) {
    const auto& d = j.at("dims");
    if (d.value("state", m.state_dim) != m.state_dim || d.value("obs", m.obs_dim) != m.obs_dim ||
        d.value("action", m.action_dim) != m.action_dim)
      throw InvalidArgument("model JSON: dims do not match the catalog entry");
  }
  return m;
}

// ---------------------------------------------------------------------------
// Diffeomorphic probes of catalog maps

/// Runs check_diffeomorphic on xi -> F(x, a, xi) over a (x, a) box and
/// mu's support hint (or `omega_box`).
inline DiffeoReport check_transition_diffeomorphic(const StochasticControlModel& m, const Box& param_box,
                                                   std::size_t grid_res, std::optional<Box> omega_box = std::nullopt,
                                                   const DiffeoTolerances& tol = {}) {
  require(param_box.dim() == m.state_dim + m.action_dim, "parameter box must cover (x, a)");
  Box ob;
  if (omega_box) {
    ob = *omega_box;
  } else {
    if (!m.mu.support_hint() || !m.mu.support_hint()->nondegenerate()) {
      DiffeoReport r;
      r.verdict = Verdict::Fail;
      r.min_abs_jacobian_det = 0.0;
      r.witnesses.push_back({{"probe", "support"}, {"reason", "state noise law has a degenerate support"}});
      return r;
    }
    ob = *m.mu.support_hint();
  }
  return check_diffeomorphic(transition_map(m), param_box, ob, grid_res, tol);
}

/// Same for eta -> G(a, x', eta) with s2 = (a, x').
inline DiffeoReport check_observation_diffeomorphic(const StochasticControlModel& m, const Box& param_box,
                                                    std::size_t grid_res, std::optional<Box> omega_box = std::nullopt,
                                                    const DiffeoTolerances& tol = {}) {
  require(m.flavor == Flavor::POMDP, "observation probe expects the POMDP flavor");
  require(param_box.dim() == m.action_dim + m.state_dim, "parameter box must cover (a, x')");
  Box ob;
  if (omega_box) {
    ob = *omega_box;
  } else {
    if (!m.nu.support_hint() || !m.nu.support_hint()->nondegenerate()) {
      DiffeoReport r;
      r.verdict = Verdict::Fail;
      r.min_abs_jacobian_det = 0.0;
      r.witnesses.push_back({{"probe", "support"}, {"reason", "observation noise law has a degenerate support"}});
      return r;
    }
    ob = *m.nu.support_hint();
  }
  ParamMap phi = [&m](const Vec& s2, const Vec& eta) {
    return observe(m, s2.head(m.action_dim), s2.tail(m.state_dim), eta);
  };
  return check_diffeomorphic(phi, param_box, ob, grid_res, tol);
}

}  // namespace beliefmdp
