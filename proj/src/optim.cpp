#include "flatopt/optim.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <stdexcept>

namespace flatopt {

namespace {

ParamVector evaluate(const Objective& obj, const ParamVector& theta, const Batch& batch,
                     TurboState& state) {
  ParamVector g = obj.gradient(theta, batch);
  ++state.eval_counter;
  if (!g.all_finite()) throw std::domain_error("objective returned a non-finite gradient");
  return g;
}

void require_mode(const OptimizerConfig& cfg, Mode expected) {
  if (cfg.mode != expected) {
    throw std::invalid_argument("step function for " + std::string(to_string(expected)) +
                                " called with mode " + std::string(to_string(cfg.mode)));
  }
}

// Scales `dir` to length β·‖base‖ and adds it to base.
ParamVector rebuild_from_cache(const ParamVector& base, const ParamVector& cached, double beta) {
  const double base_norm = l2_norm(base);
  const double cached_norm = l2_norm(cached);
  if (base_norm < kDegenerateNorm || cached_norm < kDegenerateNorm) return base;
  return axpy(beta * (base_norm / cached_norm), cached, base);
}

bool is_cache_step(const TurboState& state, const std::optional<ParamVector>& cache) {
  return !cache || state.iter_in_task % state.current_k == 0;
}

void refresh_k(TurboState& state, const OptimizerConfig& cfg) {
  state.current_k = cfg.scheduler_on ? scheduled_k(cfg.k0, cfg.c, state.task_index, cfg.num_tasks)
                                     : std::max(cfg.k0, 1);
}

// g_s at θ given g, with the one evaluation it needs.
ParamVector perturbed_gradient(const Objective& obj, const ParamVector& theta,
                               const Batch& batch, const ParamVector& g, double rho,
                               TurboState& state) {
  if (l2_norm(g) < kDegenerateNorm) return g;
  return evaluate(obj, axpy(1.0, sam_perturbation(g, rho), theta), batch, state);
}

// g_1 and g_f at θ_p given g_0.
std::pair<ParamVector, ParamVector> flatness_from_proxy(const Objective& obj,
                                                        const ParamVector& theta_p,
                                                        const Batch& batch, const ParamVector& g_0,
                                                        double rho, double rho_prime,
                                                        TurboState& state) {
  if (l2_norm(g_0) < kDegenerateNorm) return {g_0, ParamVector(g_0.size())};
  ParamVector g_1 = evaluate(obj, axpy(1.0, sam_perturbation(g_0, rho_prime), theta_p), batch, state);
  ParamVector g_f = scale(rho / rho_prime, subtract(g_1, g_0));
  return {std::move(g_1), std::move(g_f)};
}

StepResult finish(const ParamVector& theta, const OptimizerConfig& cfg, GradientBundle bundle,
                  TurboState& state, std::uint64_t evals_before) {
  ParamVector next = axpy(-cfg.lr, bundle.update, theta);
  bundle.evals = static_cast<int>(state.eval_counter - evals_before);
  ++state.iter_in_task;
  return {std::move(next), std::move(bundle)};
}

}  // namespace

std::string_view to_string(Mode mode) {
  switch (mode) {
    case Mode::Sgd: return "SGD";
    case Mode::Sam: return "SAM";
    case Mode::LookSam: return "LOOKSAM";
    case Mode::CFlat: return "CFLAT";
    case Mode::Turbo: return "TURBO";
  }
  return "?";
}

std::optional<Mode> parse_mode(std::string_view name) {
  std::string upper(name);
  std::transform(upper.begin(), upper.end(), upper.begin(),
                 [](unsigned char ch) { return static_cast<char>(std::toupper(ch)); });
  for (Mode m : {Mode::Sgd, Mode::Sam, Mode::LookSam, Mode::CFlat, Mode::Turbo}) {
    if (to_string(m) == upper) return m;
  }
  return std::nullopt;
}

void OptimizerConfig::validate() const {
  auto fail = [](const char* field, const char* why) {
    throw std::invalid_argument(std::string(field) + ": " + why);
  };
  if (!(lr > 0.0) || !std::isfinite(lr)) fail("lr", "must be > 0");
  if (!(rho > 0.0) || !std::isfinite(rho)) fail("rho", "must be > 0");
  if (rho_prime && (!(*rho_prime > 0.0) || !std::isfinite(*rho_prime))) fail("rho_prime", "must be > 0");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) fail("lambda", "must be >= 0");
  if (!(beta >= 0.0) || !std::isfinite(beta)) fail("beta", "must be >= 0");
  if (!(delta > 0.0 && delta < 1.0)) fail("delta", "must lie in (0, 1)");
  if (k0 < 1) fail("k0", "must be >= 1");
  if (!(c >= 0.0) || !std::isfinite(c)) fail("c", "must be >= 0");
  if (num_tasks < 1) fail("num_tasks", "must be >= 1");
  if (!(m >= 0.0)) fail("m", "must be >= 0");
}

EmaState ema_update(EmaState state, Branch which, double sq_norm, double delta) {
  double& mu = which == Branch::Sharp ? state.mu_s : state.mu_f;
  double& sigma = which == Branch::Sharp ? state.sigma_s : state.sigma_f;
  mu = delta * mu + (1.0 - delta) * sq_norm;
  const double dev = sq_norm - mu;
  sigma = delta * sigma + (1.0 - delta) * dev * dev;
  return state;
}

bool trigger(const EmaState& ema, Branch which, double sq_norm, double m) {
  const double mu = which == Branch::Sharp ? ema.mu_s : ema.mu_f;
  const double sigma = which == Branch::Sharp ? ema.sigma_s : ema.sigma_f;
  if (std::isinf(m)) return false;
  return sq_norm >= mu + m * sigma;
}

int scheduled_k(int k0, double c, int t, int num_tasks) {
  if (num_tasks < 1) throw std::invalid_argument("scheduled_k: N must be >= 1");
  const double k = std::floor(static_cast<double>(k0) + c * static_cast<double>(t) /
                                                            static_cast<double>(num_tasks));
  return std::max(1, static_cast<int>(k));
}

TurboState make_state(const OptimizerConfig& cfg) {
  TurboState state;
  begin_task(state, cfg, 0);
  return state;
}

void begin_task(TurboState& state, const OptimizerConfig& cfg, int task) {
  state.cached_gvs.reset();
  state.cached_gvf.reset();
  state.ema = EmaState{};
  state.iter_in_task = 0;
  state.task_index = task;
  refresh_k(state, cfg);
}

ParamVector sam_perturbation(const ParamVector& g, double rho) {
  const double norm = l2_norm(g);
  if (norm < kDegenerateNorm) return ParamVector(g.size());
  return scale(rho / norm, g);
}

ParamVector orthogonal_component(const ParamVector& v, const ParamVector& ref) {
  const double ref_sq = dot(ref, ref);
  if (std::sqrt(ref_sq) < kDegenerateNorm) return v;
  return axpy(-dot(v, ref) / ref_sq, ref, v);
}

ParamVector proxy_point(const ParamVector& theta, const ParamVector& g, const ParamVector& g_s,
                        double rho) {
  const ParamVector increment = subtract(g_s, g);
  const double norm = l2_norm(increment);
  if (norm < kDegenerateNorm) return theta;
  return axpy(rho / norm, increment, theta);
}

ParamVector simulate_sharpness(const ParamVector& g, const ParamVector& cached_gvs, double beta) {
  return rebuild_from_cache(g, cached_gvs, beta);
}

ParamVector simulate_flatness(const ParamVector& g_0, const ParamVector& cached_gvf, double beta) {
  return rebuild_from_cache(g_0, cached_gvf, beta);
}

SamGradients sam_gradient(const Objective& obj, const ParamVector& theta, const Batch& batch,
                          double rho, TurboState& state) {
  ParamVector g = evaluate(obj, theta, batch, state);
  ParamVector g_s = perturbed_gradient(obj, theta, batch, g, rho, state);
  return {std::move(g), std::move(g_s)};
}

FlatnessGradients flatness_gradient(const Objective& obj, const ParamVector& theta_p,
                                    const Batch& batch, double rho, double rho_prime,
                                    TurboState& state) {
  if (!(rho_prime > 0.0)) throw std::invalid_argument("flatness_gradient: rho_prime must be > 0");
  ParamVector g_0 = evaluate(obj, theta_p, batch, state);
  auto [g_1, g_f] = flatness_from_proxy(obj, theta_p, batch, g_0, rho, rho_prime, state);
  return {std::move(g_0), std::move(g_1), std::move(g_f)};
}

StepResult sgd_step(const Objective& obj, const ParamVector& theta, const Batch& batch,
                    const OptimizerConfig& cfg, TurboState& state) {
  require_mode(cfg, Mode::Sgd);
  const auto before = state.eval_counter;
  GradientBundle bundle;
  bundle.g = evaluate(obj, theta, batch, state);
  bundle.update = *bundle.g;
  return finish(theta, cfg, std::move(bundle), state, before);
}

StepResult sam_step(const Objective& obj, const ParamVector& theta, const Batch& batch,
                    const OptimizerConfig& cfg, TurboState& state) {
  require_mode(cfg, Mode::Sam);
  const auto before = state.eval_counter;
  auto [g, g_s] = sam_gradient(obj, theta, batch, cfg.rho, state);
  GradientBundle bundle;
  bundle.sharp_triggered = true;
  bundle.sharp_computed = true;
  bundle.update = g_s;
  bundle.g = std::move(g);
  bundle.g_s = std::move(g_s);
  return finish(theta, cfg, std::move(bundle), state, before);
}

StepResult looksam_step(const Objective& obj, const ParamVector& theta, const Batch& batch,
                        const OptimizerConfig& cfg, TurboState& state) {
  require_mode(cfg, Mode::LookSam);
  const auto before = state.eval_counter;
  GradientBundle bundle;
  ParamVector g = evaluate(obj, theta, batch, state);
  ParamVector g_s;
  bundle.sharp_triggered = true;
  if (is_cache_step(state, state.cached_gvs)) {
    g_s = perturbed_gradient(obj, theta, batch, g, cfg.rho, state);
    state.cached_gvs = orthogonal_component(g_s, g);
    bundle.g_vs = state.cached_gvs;
    bundle.sharp_computed = true;
  } else {
    g_s = simulate_sharpness(g, *state.cached_gvs, cfg.beta);
    bundle.sharp_simulated = true;
  }
  bundle.update = g_s;
  bundle.g = std::move(g);
  bundle.g_s = std::move(g_s);
  refresh_k(state, cfg);
  return finish(theta, cfg, std::move(bundle), state, before);
}

StepResult cflat_step(const Objective& obj, const ParamVector& theta, const Batch& batch,
                      const OptimizerConfig& cfg, TurboState& state) {
  require_mode(cfg, Mode::CFlat);
  const auto before = state.eval_counter;
  const double rho_prime = cfg.effective_rho_prime();
  GradientBundle bundle;
  ParamVector g = evaluate(obj, theta, batch, state);
  ParamVector g_s = perturbed_gradient(obj, theta, batch, g, cfg.rho, state);
  const ParamVector theta_p = proxy_point(theta, g, g_s, cfg.rho);
  ParamVector g_0 = evaluate(obj, theta_p, batch, state);
  auto [g_1, g_f] = flatness_from_proxy(obj, theta_p, batch, g_0, cfg.rho, rho_prime, state);

  bundle.update = g_s;
  bundle.update = axpy(cfg.lambda, g_f, bundle.update);
  bundle.sharp_triggered = bundle.flat_triggered = true;
  bundle.sharp_computed = bundle.flat_computed = true;
  bundle.g_vs = orthogonal_component(g_s, g);
  bundle.g_vf = orthogonal_component(g_f, g_0);
  bundle.g = std::move(g);
  bundle.g_s = std::move(g_s);
  bundle.g_0 = std::move(g_0);
  bundle.g_1 = std::move(g_1);
  bundle.g_f = std::move(g_f);
  return finish(theta, cfg, std::move(bundle), state, before);
}

StepResult turbo_step(const Objective& obj, const ParamVector& theta, const Batch& batch,
                      const OptimizerConfig& cfg, TurboState& state) {
  require_mode(cfg, Mode::Turbo);
  const auto before = state.eval_counter;
  const double rho_prime = cfg.effective_rho_prime();
  GradientBundle bundle;

  ParamVector g = evaluate(obj, theta, batch, state);
  const double g_sq = squared_norm(g);
  state.ema = ema_update(state.ema, Branch::Sharp, g_sq, cfg.delta);
  bundle.update = g;

  const bool sharp = cfg.trigger_on ? trigger(state.ema, Branch::Sharp, g_sq, cfg.m) : true;
  bundle.sharp_triggered = sharp;

  ParamVector g_s = g;
  ParamVector theta_p = theta;
  std::optional<ParamVector> g_0;
  if (sharp) {
    if (is_cache_step(state, state.cached_gvs)) {
      g_s = perturbed_gradient(obj, theta, batch, g, cfg.rho, state);
      state.cached_gvs = orthogonal_component(g_s, g);
      bundle.g_vs = state.cached_gvs;
      bundle.sharp_computed = true;
    } else {
      g_s = simulate_sharpness(g, *state.cached_gvs, cfg.beta);
      bundle.sharp_simulated = true;
    }
    bundle.update = g_s;
    theta_p = proxy_point(theta, g, g_s, cfg.rho);
    g_0 = evaluate(obj, theta_p, batch, state);
  } else if (cfg.strict_alg1) {
    // ε₁* is zero when g_s = g, so the proxy is θ itself and g_0 = g.
    g_0 = g;
  }

  if (g_0) {
    const double g0_sq = squared_norm(*g_0);
    state.ema = ema_update(state.ema, Branch::Flat, g0_sq, cfg.delta);
    const bool flat = cfg.trigger_on ? trigger(state.ema, Branch::Flat, g0_sq, cfg.m) : true;
    bundle.flat_triggered = flat;
    if (flat) {
      ParamVector g_f;
      if (is_cache_step(state, state.cached_gvf)) {
        auto [g_1, gf] = flatness_from_proxy(obj, theta_p, batch, *g_0, cfg.rho, rho_prime, state);
        g_f = std::move(gf);
        state.cached_gvf = orthogonal_component(g_f, *g_0);
        bundle.g_vf = state.cached_gvf;
        bundle.g_1 = std::move(g_1);
        bundle.flat_computed = true;
      } else {
        g_f = simulate_flatness(*g_0, *state.cached_gvf, cfg.beta);
        bundle.flat_simulated = true;
      }
      bundle.update = axpy(cfg.lambda, g_f, bundle.update);
      bundle.g_f = std::move(g_f);
    }
  }

  refresh_k(state, cfg);
  bundle.g = std::move(g);
  bundle.g_s = std::move(g_s);
  bundle.g_0 = std::move(g_0);
  return finish(theta, cfg, std::move(bundle), state, before);
}

StepResult optimizer_step(const Objective& obj, const ParamVector& theta, const Batch& batch,
                          const OptimizerConfig& cfg, TurboState& state) {
  switch (cfg.mode) {
    case Mode::Sgd: return sgd_step(obj, theta, batch, cfg, state);
    case Mode::Sam: return sam_step(obj, theta, batch, cfg, state);
    case Mode::LookSam: return looksam_step(obj, theta, batch, cfg, state);
    case Mode::CFlat: return cflat_step(obj, theta, batch, cfg, state);
    case Mode::Turbo: return turbo_step(obj, theta, batch, cfg, state);
  }
  throw std::invalid_argument("unknown optimizer mode");
}

}  // namespace flatopt
