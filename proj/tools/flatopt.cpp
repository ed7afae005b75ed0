// flatopt: run, compare and sweep continual-learning optimizer experiments.

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "flatopt/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Flatness-aware continual-learning optimizer experiments"};
  app.require_subcommand(1);

  std::string config;
  std::string out_dir = "out";
  bool timing = false;
  std::vector<std::string> modes;
  std::string param;
  std::vector<double> values;

  auto* run = app.add_subcommand("run", "Train one configuration and write result files");
  run->add_option("config", config, "JSON experiment config")->required();
  run->add_option("--out", out_dir, "Output directory");
  run->add_flag("--timing", timing, "Add wall-clock throughput to summary.json");

  auto* compare = app.add_subcommand("compare", "Run several optimizer modes on the same stream");
  compare->add_option("config", config, "JSON experiment config")->required();
  compare->add_option("--modes", modes, "Modes: SGD SAM LOOKSAM CFLAT TURBO")->required()->delimiter(',');
  compare->add_option("--out", out_dir, "Output directory");

  auto* sweep = app.add_subcommand("sweep", "Vary one optimizer hyperparameter");
  sweep->add_option("config", config, "JSON experiment config")->required();
  sweep->add_option("--param", param, "beta | k0 | m | rho | lambda")->required();
  sweep->add_option("--values", values, "Values to try")->required()->delimiter(',');
  sweep->add_option("--out", out_dir, "Output directory");

  auto* validate = app.add_subcommand("validate", "Parse and range-check a config");
  validate->add_option("config", config, "JSON experiment config")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (*run) return flatopt::cmd_run(config, out_dir, timing, std::cout, std::cerr);
  if (*compare) return flatopt::cmd_compare(config, modes, out_dir, std::cout, std::cerr);
  if (*sweep) return flatopt::cmd_sweep(config, param, values, out_dir, std::cout, std::cerr);
  return flatopt::cmd_validate(config, std::cout, std::cerr);
}
