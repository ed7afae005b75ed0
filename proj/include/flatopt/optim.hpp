#pragma once

// SGD, SAM, LookSAM-style reuse, C-Flat and C-Flat Turbo as step functions.
//
// Each step takes (objective, θ, batch, config, state) and returns the next θ
// together with every gradient it touched. The state is owned by one run and
// is the only thing a step mutates.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "flatopt/numcore.hpp"

namespace flatopt {

/// Norms below this are treated as zero (perturbations collapse, ratios skip).
inline constexpr double kDegenerateNorm = 1e-12;

enum class Mode { Sgd, Sam, LookSam, CFlat, Turbo };

std::string_view to_string(Mode mode);
/// Accepts upper or lower case ("turbo", "TURBO", "looksam", ...).
std::optional<Mode> parse_mode(std::string_view name);

struct OptimizerConfig {
  Mode mode = Mode::Turbo;
  double lr = 0.05;                   // η
  double rho = 0.05;                  // ρ
  std::optional<double> rho_prime;    // ρ′, defaults to ρ
  double lambda = 0.2;                // λ
  double beta = 0.8;                  // β
  double delta = 0.9;                 // δ, EMA decay
  int k0 = 5;                         // initial turbo step
  double c = 10.0;                    // scheduler slope
  int num_tasks = 1;                  // N
  double m = 1.0;                     // trigger multiplier; +inf disables regularization
  bool scheduler_on = false;
  bool trigger_on = true;
  bool strict_alg1 = true;            // evaluate the flatness branch even when sharpness is skipped

  double effective_rho_prime() const { return rho_prime.value_or(rho); }

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

enum class Branch { Sharp, Flat };

struct EmaState {
  double mu_s = 0.0;
  double sigma_s = 1e-8;
  double mu_f = 0.0;
  double sigma_f = 1e-8;
};

/// μ first, then σ against the updated μ.
EmaState ema_update(EmaState state, Branch which, double sq_norm, double delta);
/// sq_norm >= μ + m·σ
bool trigger(const EmaState& ema, Branch which, double sq_norm, double m);
/// floor(k0 + c·t/N), at least 1.
int scheduled_k(int k0, double c, int t, int num_tasks);

struct TurboState {
  std::optional<ParamVector> cached_gvs;
  std::optional<ParamVector> cached_gvf;
  EmaState ema;
  long iter_in_task = 0;
  int task_index = 0;
  int current_k = 1;
  std::uint64_t eval_counter = 0;
};

/// Fresh state positioned at the start of task 0.
TurboState make_state(const OptimizerConfig& cfg);
/// Task boundary: caches and EMA statistics are dropped, the iteration
/// counter restarts and k is re-scheduled for task t.
void begin_task(TurboState& state, const OptimizerConfig& cfg, int task);

struct GradientBundle {
  std::optional<ParamVector> g, g_s, g_0, g_1, g_f, g_vs, g_vf;
  ParamVector update;  // ḡ, the direction actually applied
  bool sharp_triggered = false;
  bool flat_triggered = false;
  bool sharp_computed = false;   // g_s from a fresh gradient evaluation
  bool sharp_simulated = false;  // g_s rebuilt from the cached g_vs
  bool flat_computed = false;
  bool flat_simulated = false;
  int evals = 0;
};

struct StepResult {
  ParamVector theta;
  GradientBundle bundle;
};

// Building blocks.

/// ρ·g/‖g‖, or zero when ‖g‖ is degenerate.
ParamVector sam_perturbation(const ParamVector& g, double rho);
/// v minus its projection on ref.
ParamVector orthogonal_component(const ParamVector& v, const ParamVector& ref);
/// θ + ρ·(g_s − g)/‖g_s − g‖
ParamVector proxy_point(const ParamVector& theta, const ParamVector& g, const ParamVector& g_s,
                        double rho);
/// g + β·(‖g‖/‖g_vs‖)·g_vs
ParamVector simulate_sharpness(const ParamVector& g, const ParamVector& cached_gvs, double beta);
/// g_0 + β·(‖g_0‖/‖g_vf‖)·g_vf
ParamVector simulate_flatness(const ParamVector& g_0, const ParamVector& cached_gvf, double beta);

struct SamGradients {
  ParamVector g;
  ParamVector g_s;
};
SamGradients sam_gradient(const Objective& obj, const ParamVector& theta, const Batch& batch,
                          double rho, TurboState& state);

struct FlatnessGradients {
  ParamVector g_0;
  ParamVector g_1;
  ParamVector g_f;
};
FlatnessGradients flatness_gradient(const Objective& obj, const ParamVector& theta_p,
                                    const Batch& batch, double rho, double rho_prime,
                                    TurboState& state);

// Step functions. Each rejects a config whose mode does not match.

StepResult sgd_step(const Objective& obj, const ParamVector& theta, const Batch& batch,
                    const OptimizerConfig& cfg, TurboState& state);
StepResult sam_step(const Objective& obj, const ParamVector& theta, const Batch& batch,
                    const OptimizerConfig& cfg, TurboState& state);
StepResult looksam_step(const Objective& obj, const ParamVector& theta, const Batch& batch,
                        const OptimizerConfig& cfg, TurboState& state);
StepResult cflat_step(const Objective& obj, const ParamVector& theta, const Batch& batch,
                      const OptimizerConfig& cfg, TurboState& state);
StepResult turbo_step(const Objective& obj, const ParamVector& theta, const Batch& batch,
                      const OptimizerConfig& cfg, TurboState& state);

/// Dispatches on cfg.mode.
StepResult optimizer_step(const Objective& obj, const ParamVector& theta, const Batch& batch,
                          const OptimizerConfig& cfg, TurboState& state);

}  // namespace flatopt
