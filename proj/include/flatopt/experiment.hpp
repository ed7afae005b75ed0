#pragma once

// JSON experiment configs and the run / compare / sweep / validate commands
// behind the flatopt CLI.

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flatopt/clbench.hpp"
#include "flatopt/optim.hpp"

namespace flatopt {

/// Config problem; `path` is the dotted JSON field path (e.g. "optimizer.rho").
class ConfigError : public std::runtime_error {
public:
  ConfigError(std::string path, const std::string& message)
      : std::runtime_error(path + ": " + message), path_(std::move(path)) {}
  const std::string& path() const noexcept { return path_; }

private:
  std::string path_;
};

struct DatasetSpec {
  enum class Kind { Gaussian, Csv } kind = Kind::Gaussian;
  GaussianStreamSpec gaussian;
  std::filesystem::path csv_path;  // resolved relative to the config file
};

struct ModelSpec {
  enum class Kind { SoftmaxLinear, Mlp, Quadratic } kind = Kind::Mlp;
  std::vector<std::size_t> hidden;  // mlp only
  // quadratic only: A = diag(eigenvalues), optimized from `init` for `steps` steps
  std::vector<double> eigenvalues;
  std::vector<double> b;
  std::vector<double> init;
  std::size_t steps = 100;
};

struct DiagnosticsSpec {
  bool enabled = false;
  std::size_t window = 5;
};

struct ExperimentConfig {
  std::optional<DatasetSpec> dataset;  // required unless the model is quadratic
  ModelSpec model;
  OptimizerConfig optimizer;
  Protocol protocol;
  DiagnosticsSpec diagnostics;
  nlohmann::json echo;  // the parsed document, echoed into summary.json
};

/// Strict parse: unknown keys and out-of-range values throw ConfigError.
ExperimentConfig parse_config(const nlohmann::json& doc,
                              const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& path);

TaskStream build_stream(const ExperimentConfig& cfg);
std::unique_ptr<Classifier> build_classifier(const ExperimentConfig& cfg,
                                             const TaskStream& stream);

struct CompareRow {
  Mode mode;
  RunMetrics metrics;
};

std::vector<CompareRow> run_compare(const ExperimentConfig& cfg, const std::vector<Mode>& modes);

enum class SweepParam { Beta, K0, M, Rho, Lambda };
std::optional<SweepParam> parse_sweep_param(std::string_view name);
std::string_view to_string(SweepParam p);
/// Copy of `cfg` with one optimizer field replaced.
ExperimentConfig with_param(const ExperimentConfig& cfg, SweepParam p, double value);

struct SweepRow {
  double value;
  RunMetrics metrics;
};
/// One run per value on the same stream; at most `threads` run concurrently.
std::vector<SweepRow> run_sweep(const ExperimentConfig& cfg, SweepParam p,
                                const std::vector<double>& values, unsigned threads);

/// Reads FLATOPT_THREADS, falling back to the hardware concurrency.
unsigned sweep_thread_cap();

// Commands. Each returns a process exit code: 0 ok, 2 config error, 1 runtime
// error. Messages go to `err`, progress to `out`.
int cmd_validate(const std::filesystem::path& config, std::ostream& out, std::ostream& err);
int cmd_run(const std::filesystem::path& config, const std::filesystem::path& out_dir,
            bool timing, std::ostream& out, std::ostream& err);
int cmd_compare(const std::filesystem::path& config, const std::vector<std::string>& modes,
                const std::filesystem::path& out_dir, std::ostream& out, std::ostream& err);
int cmd_sweep(const std::filesystem::path& config, const std::string& param,
              const std::vector<double>& values, const std::filesystem::path& out_dir,
              std::ostream& out, std::ostream& err);

}  // namespace flatopt
