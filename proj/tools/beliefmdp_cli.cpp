// beliefmdp: one subcommand per task; flags override the config file.

#include "beliefmdp/experiment.hpp"

#include <CLI11.hpp>

#include <iostream>

using namespace beliefmdp;

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> label;
  std::optional<std::size_t> threads;
};

void add_flags(CLI::App* sub, Flags& f, bool needs_config) {
  auto* c = sub->add_option("--config", f.config, "Experiment config (JSON)");
  if (needs_config) c->required();
  sub->add_option("--seed", f.seed, "Seed (overrides the config)");
  sub->add_option("--out", f.out, "Output root directory (overrides the config)");
  sub->add_option("--label", f.label, "Run label; outputs go to <out>/<task>/<label>");
  sub->add_option("--threads", f.threads, "Worker threads")->check(CLI::PositiveNumber);
}

RunOverrides overrides(const Flags& f, const std::string& task) {
  RunOverrides o;
  if (!task.empty()) o.task = task;
  o.seed = f.seed;
  o.out = f.out;
  o.label = f.label;
  o.threads = f.threads;
  const std::filesystem::path p(f.config);
  o.base_dir = p.parent_path().empty() ? std::filesystem::path(".") : p.parent_path();
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Belief-MDP reduction, filtering, continuity diagnostics and solving"};
  app.set_version_flag("--version", std::string(BELIEFMDP_VERSION));
  app.require_subcommand(1);
  Flags flags;
  std::vector<std::pair<CLI::App*, std::string>> tasks;
  for (const auto& t : task_names()) {
    auto* sub = app.add_subcommand(t, "Run the " + t + " task");
    add_flags(sub, flags, true);
    tasks.emplace_back(sub, t);
  }
  auto* val = app.add_subcommand("validate", "Check a config without running it");
  add_flags(val, flags, true);
  CLI11_PARSE(app, argc, argv);

  try {
    if (val->parsed()) {
      const auto ds = validate_config_file(flags.config, overrides(flags, ""));
      std::cout << to_json(ds).dump(2) << '\n';
      return ds.empty() ? kExitOk : kExitValidation;
    }
    for (const auto& [sub, task] : tasks) {
      if (!sub->parsed()) continue;
      json cfg;
      try {
        cfg = detail::read_json_file(flags.config);
      } catch (const InvalidArgument& e) {
        std::cerr << json{{"status", "validation_error"}, {"diagnostics", {{{"path", "/"}, {"message", e.what()}}}}}.dump(2)
                  << '\n';
        return kExitValidation;
      }
      const auto res = run_experiment(cfg, overrides(flags, task));
      if (res.exit_code == kExitOk) {
        std::cout << (res.out_dir / "report.json").string() << '\n';
      } else {
        std::cerr << res.report.dump(2) << '\n';
      }
      return res.exit_code;
    }
  } catch (const NumericFailure& e) {
    std::cerr << json{{"status", "numeric_failure"}, {"message", e.what()}, {"witness", e.witness()}}.dump(2) << '\n';
    return kExitNumeric;
  } catch (const Error& e) {
    std::cerr << json{{"status", "validation_error"}, {"message", e.what()}, {"witness", e.witness()}}.dump(2) << '\n';
    return kExitValidation;
  }
  return kExitValidation;
}
