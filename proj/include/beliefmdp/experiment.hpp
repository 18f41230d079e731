#pragma once

// Config-driven experiment runner behind the command-line tool. A config
// names one task; every default the task falls back on is written back into
// the echoed config so a report is self-describing.

#include "beliefmdp/catalog.hpp"
#include "beliefmdp/continuity.hpp"
#include "beliefmdp/solver.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>

#ifndef BELIEFMDP_VERSION
#define BELIEFMDP_VERSION "unknown"
#endif

namespace beliefmdp {

inline constexpr int kSchemaVersion = 1;
inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitNumeric = 3;

inline const std::vector<std::string>& task_names() {
  static const std::vector<std::string> t = {"simulate", "filter", "diagnose", "feller", "setconv", "solve", "probe-cost"};
  return t;
}

struct Diagnostic {
  std::string path;  ///< JSON pointer-ish location, e.g. "/solve/alpha"
  std::string message;
};

inline json to_json(const Diagnostic& d) { return {{"path", d.path}, {"message", d.message}}; }

inline json to_json(const std::vector<Diagnostic>& ds) {
  json out = json::array();
  for (const auto& d : ds) out.push_back(to_json(d));
  return out;
}

/// Command-line values that win over the config file.
struct RunOverrides {
  std::optional<std::string> task;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> label;
  std::optional<std::size_t> threads;
  /// Directory relative file references in the config resolve against.
  std::filesystem::path base_dir = ".";
};

struct RunResult {
  int exit_code = kExitOk;
  json report;
  std::filesystem::path out_dir;
  std::vector<Diagnostic> diagnostics;
};

namespace detail {

/// Reads keys from one config object, filling in defaults and flagging
/// unknown keys once the task is done reading.
class Block {
 public:
  Block(json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (j_.is_null()) j_ = json::object();
    if (!j_.is_object()) throw InvalidArgument(path_ + ": expected a JSON object");
  }

  bool has(const char* key) {
    seen_.push_back(key);
    return j_.contains(key);
  }

  template <class T>
  T get(const char* key, const T& def) {
    seen_.push_back(key);
    if (!j_.contains(key)) j_[key] = def;
    return as<T>(key);
  }

  template <class T>
  T need(const char* key) {
    seen_.push_back(key);
    if (!j_.contains(key)) throw InvalidArgument(path_ + "/" + key + ": missing required field");
    return as<T>(key);
  }

  Vec vec(const char* key, const Vec& def) {
    seen_.push_back(key);
    if (!j_.contains(key)) j_[key] = to_json_vec(def);
    try {
      return vec_from_json(j_.at(key));
    } catch (const json::exception& e) {
      throw InvalidArgument(path_ + "/" + key + ": " + e.what());
    }
  }

  json& raw(const char* key) {
    seen_.push_back(key);
    return j_[key];
  }

  std::string path(const char* key) const { return path_ + "/" + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (std::find(seen_.begin(), seen_.end(), it.key()) == seen_.end())
        throw InvalidArgument(path_ + "/" + it.key() + ": unknown field");
  }

 private:
  template <class T>
  T as(const char* key) {
    try {
      return j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw InvalidArgument(path_ + "/" + key + ": " + e.what());
    }
  }

  json& j_;
  std::string path_;
  std::vector<std::string> seen_;
};

inline json read_json_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw InvalidArgument("cannot open '" + p.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw InvalidArgument("'" + p.string() + "' is not valid JSON: " + e.what());
  }
}

/// {"catalog": name, "params": {...}} or {"tables_file": path, "flavor", "p0"}.
inline StochasticControlModel build_model(json& mj, const std::filesystem::path& base_dir) {
  Block b(mj, "/model");
  if (b.has("tables_file")) {
    const auto file = b.need<std::string>("tables_file");
    json params = {{"tables", read_json_file(base_dir / file)},
                   {"flavor", b.get<std::string>("flavor", "POMDP")}};
    if (b.has("p0")) params["p0"] = b.raw("p0");
    b.finish();
    return catalog_model("finite_tables", params);
  }
  const auto name = b.need<std::string>("catalog");
  json& params = b.raw("params");
  if (params.is_null()) params = json::object();
  b.finish();
  auto m = catalog_model(name, params);
  params = m.params;  // resolved defaults
  return m;
}

inline std::vector<double> number_list(Block& b, const char* key, const std::vector<double>& def) {
  return b.get<std::vector<double>>(key, def);
}

inline std::vector<Vec> vec_list(Block& b, const char* key, const std::vector<Vec>& def) {
  json& j = b.raw(key);
  if (j.is_null()) {
    j = json::array();
    for (const auto& v : def) j.push_back(to_json_vec(v));
  }
  if (!j.is_array()) throw InvalidArgument(b.path(key) + ": expected a list");
  std::vector<Vec> out;
  for (const auto& e : j) out.push_back(vec_from_json(e));
  return out;
}

inline Box box_field(Block& b, const char* key, const Box& def) {
  json& j = b.raw(key);
  if (j.is_null()) j = to_json(def);
  try {
    return box_from_json(j);
  } catch (const json::exception& e) {
    throw InvalidArgument(b.path(key) + ": " + e.what());
  }
}

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw InvalidArgument("cannot write '" + p.string() + "'");
  return os;
}

inline void write_json(const std::filesystem::path& p, const json& j) {
  auto os = open_out(p);
  os << j.dump(2) << '\n';
}

struct TaskContext {
  StochasticControlModel& model;
  Block& params;
  std::uint64_t seed;
  std::filesystem::path dir;
  json outputs = json::array();
  json summary = json::object();

  std::ofstream file(const std::string& name) {
    outputs.push_back(name);
    return open_out(dir / name);
  }
  void json_file(const std::string& name, const json& j) {
    outputs.push_back(name);
    write_json(dir / name, j);
  }
};

// --- actions ---------------------------------------------------------------

inline ActionRule action_rule(const StochasticControlModel& m, Block& b, std::uint64_t seed) {
  json& pj = b.raw("policy");
  if (pj.is_null()) pj = json::object();
  Block p(pj, b.path("policy"));
  const auto kind = p.get<std::string>("kind", "constant");
  ActionRule rule;
  if (kind == "constant") {
    const Vec a = p.vec("action", Vec::Zero(m.action_dim));
    require_dim(a, m.action_dim, "policy action");
    if (m.finite) as_index(a, m.finite->n_actions, "action");
    rule = [a](std::size_t, const Belief&) { return a; };
  } else if (kind == "random") {
    const std::uint64_t ps = derive_seed(seed, 0x90c1ULL);
    if (m.finite) {
      const std::size_t na = m.finite->n_actions;
      rule = [ps, na](std::size_t t, const Belief&) {
        Rng rng = make_rng(derive_seed(ps, t));
        return index_vec(std::min(na - 1, static_cast<std::size_t>(uniform_open(rng) * static_cast<double>(na))));
      };
    } else {
      const Box box = box_field(p, "box", Box(Vec::Constant(m.action_dim, -1.0), Vec::Constant(m.action_dim, 1.0)));
      require(box.dim() == m.action_dim, "policy box dimension differs from the action dimension");
      rule = [ps, box](std::size_t t, const Belief&) {
        Rng rng = make_rng(derive_seed(ps, t));
        Vec a(box.dim());
        for (Eigen::Index j = 0; j < box.dim(); ++j) a[j] = box.lo[j] + (box.hi[j] - box.lo[j]) * uniform_open(rng);
        return a;
      };
    }
  } else {
    throw InvalidArgument(b.path("policy") + "/kind: unknown policy kind '" + kind + "' (constant | random)");
  }
  p.finish();
  return rule;
}

// --- tasks -----------------------------------------------------------------

inline void task_simulate(TaskContext& c) {
  const auto horizon = c.params.get<std::size_t>("horizon", 10);
  const auto np = c.params.get<std::size_t>("n_particles", 2000);
  const auto rule = action_rule(c.model, c.params, c.seed);
  c.params.finish();
  const auto rows = simulate_trajectory(c.model, rule, horizon, c.seed, np);
  auto os = c.file("trajectory.csv");
  write_trajectory_csv(os, rows, c.model.state_dim, c.model.action_dim, c.model.obs_dim, true);
  c.summary = {{"rows", rows.size()}};
  if (!rows.empty()) c.summary["final_belief_mean"] = to_json_vec(belief_mean(rows.back().belief));
}

inline void task_filter(TaskContext& c) {
  const auto np = c.params.get<std::size_t>("n_particles", 2000);
  auto& m = c.model;
  std::vector<TrajectoryRow> rows;
  double loglik = 0.0;
  if (c.params.has("observations")) {
    const auto ys = vec_list(c.params, "observations", {});
    const Vec a = c.params.vec("action", Vec::Zero(m.action_dim));
    require_dim(a, m.action_dim, "action");
    Belief z = initial_belief(m, np, c.seed);
    for (std::size_t t = 0; t < ys.size(); ++t) {
      require_dim(ys[t], m.obs_dim, "observation");
      FilterOptions fo;
      fo.seed = derive_seed(c.seed, 0x20000ULL + t);
      auto st = bayes_update(m, z, a, ys[t], fo);
      loglik += std::log(st.predictive_likelihood);
      z = std::move(st.posterior);
      rows.push_back({t, Vec(), a, ys[t], z});
    }
    c.summary["log_likelihood"] = loglik;
  } else {
    const auto horizon = c.params.get<std::size_t>("horizon", 10);
    const auto rule = action_rule(m, c.params, c.seed);
    rows = simulate_trajectory(m, rule, horizon, c.seed, np);
  }
  c.params.finish();
  auto os = c.file("filter.csv");
  write_trajectory_csv(os, rows, m.state_dim, m.action_dim, m.obs_dim, false);
  c.summary["steps"] = rows.size();
  if (!rows.empty()) {
    c.summary["final_belief_mean"] = to_json_vec(belief_mean(rows.back().belief));
    c.summary["final_belief_entropy"] = belief_entropy(rows.back().belief);
  }
}

inline void task_diagnose(TaskContext& c) {
  auto& m = c.model;
  const auto kernel = c.params.get<std::string>("kernel", "transition");
  ParamMap phi;
  NoiseDistribution noise;
  Vec s2;
  if (kernel == "transition") {
    const Vec x = c.params.vec("x", Vec::Zero(m.state_dim));
    const Vec a = c.params.vec("a", Vec::Zero(m.action_dim));
    require_dim(x, m.state_dim, "x");
    require_dim(a, m.action_dim, "a");
    phi = transition_map(m);
    noise = m.mu;
    s2 = concat(x, a);
  } else if (kernel == "observation") {
    require(m.flavor == Flavor::POMDP, "observation kernel diagnostics need the POMDP flavor");
    const Vec a = c.params.vec("a", Vec::Zero(m.action_dim));
    const Vec xn = c.params.vec("x_next", Vec::Zero(m.state_dim));
    require_dim(a, m.action_dim, "a");
    require_dim(xn, m.state_dim, "x_next");
    phi = [&m](const Vec& p, const Vec& eta) { return observe(m, p.head(m.action_dim), p.tail(m.state_dim), eta); };
    noise = m.nu;
    s2 = concat(a, xn);
  } else {
    throw InvalidArgument(c.params.path("kernel") + ": unknown kernel '" + kernel + "' (transition | observation)");
  }
  const auto radii = number_list(c.params, "radii", dyadic_radii(6));
  const auto dirs = vec_list(c.params, "directions", {Vec::Unit(s2.size(), s2.size() - 1)});
  const auto n = c.params.get<long long>("n_samples", 20000);
  ProfileOptions opt;
  opt.dictionary_size = c.params.get<std::size_t>("dictionary_size", opt.dictionary_size);
  opt.discontinuity_floor = c.params.get<double>("floor", opt.discontinuity_floor);
  opt.grid_resolution = c.params.get<std::size_t>("grid_resolution", opt.grid_resolution);
  opt.use_density = c.params.get<bool>("use_density", opt.use_density);
  std::optional<Box> diffeo_box;
  std::size_t diffeo_res = 0;
  if (c.params.has("diffeo")) {
    Block d(c.params.raw("diffeo"), c.params.path("diffeo"));
    diffeo_box = box_field(d, "param_box", Box(s2.array() - 1.0, s2.array() + 1.0));
    diffeo_res = d.get<std::size_t>("grid_res", 9);
    d.finish();
  }
  c.params.finish();

  const auto prof = continuity_profile(phi, noise, s2, radii, dirs, n, c.seed, opt);
  {
    auto os = c.file("profile.csv");
    write_profile_csv(os, prof);
  }
  c.json_file("profile.json", to_json(prof, true));
  const auto& wt = prof.worst_tv(radii.size() - 1);
  const auto& wb = prof.worst_bl(radii.size() - 1);
  c.summary = {{"tv_verdict", to_string(prof.tv_verdict)},
               {"bl_verdict", to_string(prof.bl_verdict)},
               {"tv_mode", prof.tv_mode},
               {"smallest_radius", radii.back()},
               {"tv_at_smallest_radius", to_json(wt.tv)},
               {"bl_at_smallest_radius", to_json(wb.bl)}};
  if (diffeo_box) {
    const auto rep = kernel == "transition" ? check_transition_diffeomorphic(m, *diffeo_box, diffeo_res)
                                            : check_observation_diffeomorphic(m, *diffeo_box, diffeo_res);
    c.json_file("diffeo.json", to_json(rep));
    c.summary["diffeo_verdict"] = to_json(rep).at("verdict");
  }
}

inline void task_feller(TaskContext& c) {
  auto& m = c.model;
  const Vec x = c.params.vec("x", Vec::Zero(m.state_dim));
  const Vec a = c.params.vec("a", Vec::Zero(m.action_dim));
  const auto radii = number_list(c.params, "radii", {0.5, 0.2, 0.1, 0.05, 0.02});
  FellerOptions opt;
  opt.seed = c.seed;
  opt.n_samples = c.params.get<long long>("n_samples", opt.n_samples);
  opt.f_dictionary_size = c.params.get<std::size_t>("f_dictionary_size", opt.f_dictionary_size);
  opt.y_partition_res = c.params.get<std::size_t>("y_partition_res", opt.y_partition_res);
  opt.discontinuity_floor = c.params.get<double>("floor", opt.discontinuity_floor);
  opt.direction = c.params.vec("direction", Vec::Unit(m.state_dim + m.action_dim, 0));
  c.params.finish();
  const auto rep = feller_modulus(m, x, a, radii, opt);
  {
    auto os = c.file("feller.csv");
    os << "radius,modulus,band\n";
    for (const auto& e : rep.estimates)
      os << format_number(e.radius) << ',' << format_number(e.modulus) << ',' << format_number(e.band) << '\n';
  }
  c.json_file("feller.json", to_json(rep, true));
  json mods = json::array();
  for (const auto& e : rep.estimates) mods.push_back(e.modulus);
  c.summary = {{"verdict", to_string(rep.verdict)}, {"modulus_by_radius", mods}, {"radii", radii}};
}

inline ParamMap named_map(const std::string& name, const StochasticControlModel& m) {
  if (name == "scaling") return [](const Vec& s, const Vec& w) { return Vec(s[0] * w); };
  if (name == "rotation") {
    return [](const Vec& s, const Vec& w) {
      require(w.size() == 2, "rotation map acts on the plane");
      const double cs = std::cos(s[0]), sn = std::sin(s[0]);
      return Vec((Vec(2) << cs * w[0] - sn * w[1], sn * w[0] + cs * w[1]).finished());
    };
  }
  if (name == "transition") return transition_map(m);
  throw InvalidArgument("unknown map '" + name + "' (scaling | rotation | transition)");
}

inline void task_setconv(TaskContext& c) {
  const auto map = c.params.get<std::string>("map", "scaling");
  const ParamMap phi = named_map(map, c.model);
  json& kj = c.params.raw("K");
  if (kj.is_null()) kj = to_json(CompactSet::make_ball(Vec::Zero(2), 1.0));
  const CompactSet K = compact_set_from_json(kj);
  const Vec s2 = c.params.vec("s2", Vec::Ones(1));
  const auto ladder = vec_list(c.params, "s2_prime", {Vec::Constant(1, 1.1), Vec::Constant(1, 1.01), Vec::Constant(1, 1.001)});
  const auto res = c.params.get<std::size_t>("resolution", 600);
  SetConvergenceOptions opt;
  opt.boundary_samples = c.params.get<std::size_t>("boundary_samples", 0);
  c.params.finish();
  require(!ladder.empty(), "setconv: empty s2_prime ladder");

  auto os = c.file("setconv.csv");
  os << "step";
  for (Eigen::Index j = 0; j < s2.size(); ++j) os << ",s2_prime" << j;
  os << ",symdiff,hausdorff,failure_fraction\n";
  json reports = json::array();
  for (std::size_t i = 0; i < ladder.size(); ++i) {
    require_dim(ladder[i], s2.size(), "s2_prime");
    const auto r = set_convergence_check(phi, K, s2, ladder[i], res, opt);
    os << i;
    for (Eigen::Index j = 0; j < s2.size(); ++j) os << ',' << format_number(ladder[i][j]);
    os << ',' << format_number(r.symdiff_measure) << ',' << format_number(r.hausdorff_distance) << ','
       << format_number(r.failure_fraction) << '\n';
    reports.push_back(to_json(r));
  }
  c.summary = {{"steps", reports}};
}

inline CostSpec solve_cost(const StochasticControlModel& m, Block& b, AssumptionMode mode, double alpha) {
  Mat table;
  if (b.has("cost_table")) {
    table = mat_from_json(b.raw("cost_table"));
  } else {
    require(m.finite->cost.size() > 0, "solve: model tables carry no cost; give solve/cost_table");
    table = m.finite->cost;
    b.raw("cost_table") = to_json_mat(table);
  }
  CostSpec cost = table_cost(table, mode, alpha);
  if (b.has("lower_bound")) cost.lower_bound = b.need<double>("lower_bound");
  else b.raw("lower_bound") = cost.lower_bound;
  return cost;
}

inline void task_solve(TaskContext& c) {
  auto& m = c.model;
  require(m.finite.has_value(), "solve: the model must be finite with exact tables");
  const double alpha = c.params.get<double>("alpha", 0.9);
  const auto mode = assumption_from_string(c.params.get<std::string>("mode", "D"));
  const auto N = c.params.get<std::size_t>("resolution", 200);
  Block it(c.params.raw("iteration"), c.params.path("iteration"));
  const auto kind = it.get<std::string>("kind", "tolerance");
  IterationMode im;
  if (kind == "tolerance") {
    im = IterationMode::tolerance(it.get<double>("epsilon", 1e-3), it.get<std::size_t>("max_iterations", 100000));
  } else if (kind == "horizon") {
    im = IterationMode::finite_horizon(it.need<std::size_t>("T"));
  } else {
    throw InvalidArgument(c.params.path("iteration") + "/kind: unknown kind '" + kind + "' (tolerance | horizon)");
  }
  it.finish();
  const CostSpec cost = solve_cost(m, c.params, mode, alpha);
  c.params.finish();
  validate(cost);

  const auto vf = value_iteration(m, cost, N, im);
  c.json_file("value_function.json", to_json(vf));
  {
    auto os = c.file("convergence.csv");
    write_convergence_csv(os, vf);
  }
  {
    auto os = c.file("policy.csv");
    os << "node";
    for (std::size_t j = 0; j < vf.grid.n_states(); ++j) os << ",z" << j;
    os << ",value,action\n";
    const auto& v = vf.final_values();
    for (std::size_t i = 0; i < vf.grid.size(); ++i) {
      os << i;
      for (double w : vf.grid.belief(i)) os << ',' << format_number(w);
      os << ',' << format_number(v[i]) << ',' << vf.policy[i] << '\n';
    }
  }
  const auto& v = vf.final_values();
  c.summary = {{"sweeps", vf.sup_diff.size()},
               {"final_sup_diff", vf.sup_diff.empty() ? 0.0 : vf.sup_diff.back()},
               {"stopping_threshold", vf.stopping_threshold},
               {"converged", vf.converged},
               {"grid_nodes", vf.grid.size()},
               {"value_min", *std::min_element(v.begin(), v.end())},
               {"value_max", *std::max_element(v.begin(), v.end())},
               {"projection_error_bound", vf.projection_error_bound}};
}

inline void task_probe_cost(TaskContext& c) {
  Block cj(c.params.raw("cost"), c.params.path("cost"));
  const auto family = cj.get<std::string>("family", "quadratic");
  const Mat X = mat_from_json(cj.get<json>("X", json::array({json::array({1.0})})), true);
  const Mat A = mat_from_json(cj.get<json>("A", json::array({json::array({1.0})})), true);
  cj.finish();
  CostSpec cost;
  if (family == "quadratic") cost = quadratic_cost(X, A);
  else if (family == "estimation") cost = estimation_cost(X, A);
  else throw InvalidArgument(c.params.path("cost") + "/family: unknown family '" + family + "' (quadratic | estimation)");
  const Box C = box_field(c.params, "C", Box(Vec::Constant(X.cols(), -1.0), Vec::Constant(X.cols(), 1.0)));
  const Box S = box_field(c.params, "search_box", Box(Vec::Constant(A.cols(), -1.0), Vec::Constant(A.cols(), 1.0)));
  require(C.dim() == X.cols(), "probe-cost: C dimension differs from X");
  require(S.dim() == A.cols(), "probe-cost: search box dimension differs from A");
  const double gamma = c.params.get<double>("gamma", 1.0);
  const auto mode = c.params.get<std::string>("mode", "k_inf");
  require(mode == "k_inf" || mode == "inf_compact", c.params.path("mode") + ": expected k_inf or inf_compact");
  KinfProbeOptions opt;
  opt.grow_state_box = mode == "inf_compact";
  opt.seed = c.seed;
  opt.starts_per_shell = c.params.get<std::size_t>("starts_per_shell", opt.starts_per_shell);
  opt.max_doublings = c.params.get<int>("max_doublings", opt.max_doublings);
  c.params.finish();

  const auto rep = kinf_compact_probe(cost, C, gamma, S, opt);
  c.json_file("probe.json", to_json(rep));
  c.summary = {{"verdict", to_string(rep.verdict)},
               {"escape_radius", rep.escape_radius},
               {"max_radius_searched", rep.max_radius_searched}};
  std::optional<double> bound;
  if (family == "quadratic" && min_eigenvalue(A) > 0.0) bound = quadratic_action_radius_bound(A, gamma);
  if (family == "estimation" && std::abs(A.determinant()) > 0.0) {
    const double r = std::max(C.lo.norm(), C.hi.norm());  // C lies in the ball of this radius
    bound = estimation_action_radius_bound(X, A, gamma, r);
  }
  if (bound) {
    c.summary["analytic_radius_bound"] = *bound;
    if (!opt.grow_state_box) c.summary["bound_respected"] = rep.escape_radius <= *bound * (1.0 + 1e-6);
  }
}

}  // namespace detail

/// Schema and cross-field checks without running the task.
inline std::vector<Diagnostic> validate_config(json cfg, const RunOverrides& ov = {}) {
  std::vector<Diagnostic> out;
  if (!cfg.is_object()) return {{"/", "config must be a JSON object"}};
  if (!cfg.contains("schema_version")) out.push_back({"/schema_version", "missing schema_version"});
  else if (cfg["schema_version"] != kSchemaVersion)
    out.push_back({"/schema_version", "unsupported schema_version (expected 1)"});
  if (ov.seed) cfg["seed"] = *ov.seed;
  if (!cfg.contains("seed")) out.push_back({"/seed", "missing seed (every run must be seeded)"});
  else if (!cfg["seed"].is_number_unsigned() && !(cfg["seed"].is_number_integer() && cfg["seed"].get<long long>() >= 0))
    out.push_back({"/seed", "seed must be a nonnegative integer"});
  std::string task;
  if (ov.task) task = *ov.task;
  if (cfg.contains("task")) {
    if (!cfg["task"].is_string()) {
      out.push_back({"/task", "task must be a string"});
    } else {
      const auto t = cfg["task"].get<std::string>();
      if (!task.empty() && t != task) out.push_back({"/task", "config task '" + t + "' differs from the subcommand '" + task + "'"});
      task = t;
    }
  }
  if (task.empty()) out.push_back({"/task", "missing task"});
  else if (std::find(task_names().begin(), task_names().end(), task) == task_names().end())
    out.push_back({"/task", "unknown task '" + task + "'"});
  for (auto it = cfg.begin(); it != cfg.end(); ++it) {
    const auto& k = it.key();
    const bool known = k == "schema_version" || k == "task" || k == "seed" || k == "label" || k == "out" || k == "model" ||
                       std::find(task_names().begin(), task_names().end(), k) != task_names().end();
    if (!known) out.push_back({"/" + k, "unknown field"});
    else if (k != task && std::find(task_names().begin(), task_names().end(), k) != task_names().end())
      out.push_back({"/" + k, "parameter block for a task other than '" + task + "'"});
  }
  std::optional<StochasticControlModel> model;
  if (!cfg.contains("model")) {
    out.push_back({"/model", "missing model"});
  } else {
    try {
      json mj = cfg["model"];
      model = detail::build_model(mj, ov.base_dir);
    } catch (const std::exception& e) {
      out.push_back({"/model", e.what()});
    }
  }
  if (task == "solve" && cfg.contains("solve") && cfg["solve"].is_object()) {
    const auto& s = cfg["solve"];
    const std::string mode = s.contains("mode") && s["mode"].is_string() ? s["mode"].get<std::string>() : "D";
    const double alpha = s.contains("alpha") && s["alpha"].is_number() ? s["alpha"].get<double>() : 0.9;
    if (mode == "D" && !(alpha >= 0.0 && alpha < 1.0))
      out.push_back({"/solve/alpha", "Assumption (D) requires alpha in [0, 1); got " + json(alpha).dump()});
    else if (mode == "P" && !(alpha >= 0.0))
      out.push_back({"/solve/alpha", "alpha must be nonnegative"});
    if (mode != "D" && mode != "P") out.push_back({"/solve/mode", "mode must be D or P"});
    if (model && !model->finite) out.push_back({"/model", "solve needs a finite model with exact tables"});
  }
  return out;
}

inline std::vector<Diagnostic> validate_config_file(const std::filesystem::path& p, const RunOverrides& ov = {}) {
  json cfg;
  try {
    cfg = detail::read_json_file(p);
  } catch (const std::exception& e) {
    return {{"/", e.what()}};
  }
  RunOverrides o = ov;
  o.base_dir = p.parent_path().empty() ? std::filesystem::path(".") : p.parent_path();
  return validate_config(cfg, o);
}

/// Validates, runs the task and writes out/<task>/<label>/{report.json,
/// run_meta.json, outputs}. report.json is a pure function of the config;
/// wall-clock and thread count go to run_meta.json.
inline RunResult run_experiment(json cfg, const RunOverrides& ov = {}) {
  RunResult res;
  res.diagnostics = validate_config(cfg, ov);
  if (!res.diagnostics.empty()) {
    res.exit_code = kExitValidation;
    res.report = {{"status", "validation_error"}, {"diagnostics", to_json(res.diagnostics)}};
    return res;
  }
  if (ov.seed) cfg["seed"] = *ov.seed;
  if (ov.task) cfg["task"] = *ov.task;
  if (ov.out) cfg["out"] = *ov.out;
  if (ov.label) cfg["label"] = *ov.label;
  if (!cfg.contains("label")) cfg["label"] = "default";
  if (!cfg.contains("out")) cfg["out"] = "out";
  const auto task = cfg["task"].get<std::string>();
  const auto seed = cfg["seed"].get<std::uint64_t>();
  if (ov.threads) thread_count() = std::max<std::size_t>(1, *ov.threads);
  std::filesystem::path out_root = cfg["out"].get<std::string>();
  res.out_dir = out_root / task / cfg["label"].get<std::string>();

  const auto t0 = std::chrono::steady_clock::now();
  json report = {{"schema_version", kSchemaVersion}, {"library_version", BELIEFMDP_VERSION}, {"task", task}};
  try {
    std::filesystem::create_directories(res.out_dir);
    auto model = detail::build_model(cfg["model"], ov.base_dir);
    detail::Block params(cfg[task], "/" + task);
    detail::TaskContext ctx{model, params, seed, res.out_dir};
    if (task == "simulate") detail::task_simulate(ctx);
    else if (task == "filter") detail::task_filter(ctx);
    else if (task == "diagnose") detail::task_diagnose(ctx);
    else if (task == "feller") detail::task_feller(ctx);
    else if (task == "setconv") detail::task_setconv(ctx);
    else if (task == "solve") detail::task_solve(ctx);
    else detail::task_probe_cost(ctx);
    report["status"] = "ok";
    report["model"] = to_json(model);
    report["outputs"] = ctx.outputs;
    report["summary"] = ctx.summary;
  } catch (const NumericFailure& e) {
    res.exit_code = kExitNumeric;
    report["status"] = "numeric_failure";
    report["error"] = {{"message", e.what()}, {"witness", e.witness()}};
  } catch (const InvalidArgument& e) {
    res.exit_code = kExitValidation;
    report["status"] = "validation_error";
    report["error"] = {{"message", e.what()}, {"witness", e.witness()}};
  } catch (const std::filesystem::filesystem_error& e) {
    res.exit_code = kExitValidation;
    report["status"] = "validation_error";
    report["error"] = {{"message", e.what()}};
  }
  report["config"] = cfg;
  res.report = report;
  if (std::filesystem::is_directory(res.out_dir)) {
    detail::write_json(res.out_dir / "report.json", report);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    detail::write_json(res.out_dir / "run_meta.json",
                       {{"wall_clock_seconds", secs}, {"threads", thread_count()}, {"library_version", BELIEFMDP_VERSION}});
  }
  return res;
}

}  // namespace beliefmdp
