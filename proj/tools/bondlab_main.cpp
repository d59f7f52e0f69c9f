#include <CLI11.hpp>

#include <cstdio>

#include "bondlab/scenario.hpp"

int main(int argc, char** argv) {
  CLI::App app{"bondlab: scenario-driven bond market laboratory"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "execute a scenario file");
  std::string config;
  run->add_option("config", config, "path to the scenario JSON")->required();
  std::uint64_t seed = 0;
  bool seed_set = false;
  auto* seed_opt = run->add_option("--seed", seed, "override the seed");
  Eigen::Index paths = 0;
  auto* paths_opt = run->add_option("--paths", paths, "override the path count");
  std::string out_dir;
  auto* out_opt = run->add_option("--out", out_dir, "override the output directory");
  std::vector<std::string> only;
  run->add_option("--experiment", only,
                  "run only the named experiments (repeatable)");

  CLI11_PARSE(app, argc, argv);
  (void)seed_set;

  bondlab::RunOverrides ov;
  if (!seed_opt->empty()) ov.seed = seed;
  if (!paths_opt->empty()) ov.paths = paths;
  if (!out_opt->empty()) ov.output_dir = out_dir;
  ov.only_experiments = only;

  auto outcome = bondlab::run_scenario(config, ov);
  for (const auto& m : outcome.messages) std::fprintf(stderr, "%s\n", m.c_str());
  if (!outcome.failed_experiments.empty()) {
    std::fprintf(stderr, "failed experiments:");
    for (const auto& f : outcome.failed_experiments)
      std::fprintf(stderr, " %s", f.c_str());
    std::fprintf(stderr, "\n");
  }
  return outcome.exit_code;
}
