// Command-line front end: one subcommand per experiment stage, plus `suite`.

#include "l96/experiment.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
  using namespace l96::cli;

  CLI::App app{"Two-scale Lorenz '96 closure experiments"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<int> workers;
  std::optional<int> store_stride;
  bool dry_run = false;

  app.add_option("--config", config_path, "JSON experiment config")->required()->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "master seed (overrides the config)");
  app.add_option("--out", out, "output root directory (overrides the config)");
  app.add_option("--workers", workers, "worker threads; 0 uses all cores")->check(CLI::NonNegativeNumber);
  app.add_option("--store-stride", store_stride, "ensemble storage stride in reduced steps")
      ->check(CLI::PositiveNumber);
  app.add_flag("--dry-run", dry_run, "print the resolved plan and exit");

  std::vector<std::string> commands = stage_names();
  commands.push_back("suite");
  for (const auto& c : commands) app.add_subcommand(c, c == "suite" ? "run every stage in order" : "run the " + c + " stage");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }

  ExperimentConfig cfg;
  try {
    cfg = load_config(config_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfigError;
  }
  if (seed) cfg.seed = *seed;
  if (!out.empty()) cfg.out = out;
  if (workers) cfg.workers = *workers;
  if (store_stride) cfg.ensemble.store_stride = *store_stride;

  return run_command(app.get_subcommands().front()->get_name(), cfg, std::cerr, dry_run);
}
