// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any fail.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>
#include <string>

#include "flatopt/clbench.hpp"
#include "flatopt/diagnostics.hpp"
#include "flatopt/experiment.hpp"
#include "quadratic_rate.hpp"
#include "test_util.hpp"

using namespace flatopt;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Verdict {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const char* title, const std::function<Verdict()>& check) {
  Verdict v;
  try {
    v = check();
  } catch (const std::exception& e) {
    v = {false, std::string("exception: ") + e.what()};
  }
  if (!v.pass) ++failures;
  std::printf("[%s] %2d %s: %s\n", v.pass ? "PASS" : "FAIL", id, title, v.detail.c_str());
  std::fflush(stdout);
}

template <typename... Args>
std::string fmt(const char* f, Args... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

// Fixed batches cut from a stream's first task, cycled by the trajectory runs.
std::vector<Batch> fixed_batches(const Task& task, std::size_t size) {
  std::vector<Batch> out;
  for (std::size_t lo = 0; lo + size <= task.train.size(); lo += size) {
    Batch b;
    b.cols = task.train.cols;
    for (std::size_t i = lo; i < lo + size; ++i) b.push_back(task.train.row(i), task.train.labels[i]);
    out.push_back(std::move(b));
  }
  return out;
}

std::vector<ParamVector> trajectory(const Objective& obj, const std::vector<Batch>& batches,
                                    const ParamVector& theta0, const OptimizerConfig& cfg, int steps) {
  TurboState state = make_state(cfg);
  ParamVector theta = theta0;
  std::vector<ParamVector> out;
  for (int s = 0; s < steps; ++s) {
    theta = optimizer_step(obj, theta, batches[static_cast<std::size_t>(s) % batches.size()], cfg, state).theta;
    out.push_back(theta);
  }
  return out;
}

Verdict eval_ratio() {
  const auto start = Clock::now();
  GaussianStreamSpec spec;
  spec.dim = 4;
  spec.classes = 4;
  spec.samples_per_class = 40;  // 80 rows per task: 5 batches of 16
  const TaskStream stream = make_gaussian_stream(spec);
  MlpObjective mlp({4, 16, 4});
  Protocol protocol;
  protocol.replay_per_class = 0;

  OptimizerConfig turbo;
  turbo.k0 = 5;
  turbo.trigger_on = false;
  turbo.scheduler_on = false;
  OptimizerConfig cflat = turbo;
  cflat.mode = Mode::CFlat;
  const RunMetrics t = run_experiment(stream, mlp, turbo, protocol);
  const RunMetrics c = run_experiment(stream, mlp, cflat, protocol);

  // Every aligned 5-step window inside a task must cost exactly 12 (turbo) and 20 (cflat).
  bool windows_ok = t.steps % 5 == 0;
  for (std::size_t w = 0; w + 5 <= t.events.size(); w += 5) {
    int te = 0, ce = 0;
    for (std::size_t i = w; i < w + 5; ++i) {
      te += t.events[i].evals;
      ce += c.events[i].evals;
    }
    windows_ok = windows_ok && te == 12 && ce == 20;
  }
  const double ratio = static_cast<double>(t.eval_count) / static_cast<double>(c.eval_count);
  const double secs = seconds_since(start);
  return {windows_ok && ratio == 0.6 && secs < 5.0,
          fmt("turbo %llu / cflat %llu evals = %.3f over %zu steps, every 5-step window 12 vs 20: %s, %.2fs",
              static_cast<unsigned long long>(t.eval_count), static_cast<unsigned long long>(c.eval_count),
              ratio, t.steps, windows_ok ? "yes" : "no", secs)};
}

Verdict equivalences() {
  GaussianStreamSpec spec;
  spec.dim = 4;
  spec.classes = 4;
  const TaskStream stream = make_gaussian_stream(spec);
  MlpObjective mlp({4, 16, 4});
  Rng rng(1993);
  const ParamVector theta0 = mlp.initial_params(rng);
  const auto batches = fixed_batches(stream.tasks[0], 16);
  const int steps = 300;
  auto mode = [](Mode m) {
    OptimizerConfig c;
    c.mode = m;
    return c;
  };

  OptimizerConfig turbo_k1 = mode(Mode::Turbo);
  turbo_k1.k0 = 1;
  turbo_k1.trigger_on = false;
  OptimizerConfig cflat_l0 = mode(Mode::CFlat);
  cflat_l0.lambda = 0.0;
  OptimizerConfig never = mode(Mode::Turbo);
  never.m = std::numeric_limits<double>::infinity();
  OptimizerConfig look_k1 = mode(Mode::LookSam);
  look_k1.k0 = 1;

  const auto sam = trajectory(mlp, batches, theta0, mode(Mode::Sam), steps);
  struct Pair {
    const char* name;
    std::vector<ParamVector> a, b;
  } pairs[] = {
      {"TURBO(k=1)=CFLAT", trajectory(mlp, batches, theta0, turbo_k1, steps),
       trajectory(mlp, batches, theta0, mode(Mode::CFlat), steps)},
      {"CFLAT(l=0)=SAM", trajectory(mlp, batches, theta0, cflat_l0, steps), sam},
      {"TURBO(m=inf)=SGD", trajectory(mlp, batches, theta0, never, steps),
       trajectory(mlp, batches, theta0, mode(Mode::Sgd), steps)},
      {"LOOKSAM(k=1)=SAM", trajectory(mlp, batches, theta0, look_k1, steps), sam},
  };
  bool all = true;
  std::string detail;
  for (const auto& p : pairs) {
    const bool same = p.a == p.b;
    all = all && same;
    detail += fmt("%s %s; ", p.name, same ? "identical" : "DIFFERS");
  }
  return {all, detail + fmt("%d steps each", steps)};
}

Verdict quadratic_oracle() {
  const double diag[] = {2.0, 8.0};
  Rng rng(42);
  const ParamVector b = flatopt::testing::random_vector(rng, 2, 1.0);
  const auto q = QuadraticObjective::diagonal(diag, {b[0], b[1]});
  const ParamVector a{2.0, 8.0};
  auto apply = [&](const ParamVector& v) { return ParamVector{a[0] * v[0], a[1] * v[1]}; };
  auto unit = [](const ParamVector& v) { return scale(1.0 / l2_norm(v), v); };

  OptimizerConfig cfg;
  cfg.mode = Mode::CFlat;
  cfg.rho_prime = 0.03;
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const ParamVector theta = flatopt::testing::random_vector(rng, 2, 3.0);
    TurboState state = make_state(cfg);
    const GradientBundle bundle = cflat_step(q, theta, Batch{}, cfg, state).bundle;
    // Closed forms: ∇L = Aθ − b, so a perturbation ε adds Aε.
    const ParamVector g = subtract(apply(theta), b);
    const ParamVector g_s = axpy(cfg.rho, apply(unit(g)), g);
    const ParamVector theta_p = axpy(cfg.rho, unit(apply(g)), theta);  // g_s − g ∥ A g
    const ParamVector g_0 = subtract(apply(theta_p), b);
    const ParamVector g_1 = axpy(*cfg.rho_prime, apply(unit(g_0)), g_0);
    const ParamVector g_f = scale(cfg.rho, apply(unit(g_0)));
    for (const auto& [got, want] : {std::pair{*bundle.g_s, g_s}, std::pair{*bundle.g_0, g_0},
                                    std::pair{*bundle.g_1, g_1}, std::pair{*bundle.g_f, g_f}}) {
      worst = std::max(worst, l2_norm(subtract(got, want)));
    }
  }
  return {worst < 1e-10, fmt("max L2 error over g_s, g_0, g_1, g_f at 100 points: %.3g", worst)};
}

Verdict finite_differences() {
  const auto start = Clock::now();
  Rng rng(2024);
  SoftmaxLinearObjective soft(4, 3);
  MlpObjective mlp({4, 8, 3});
  double worst = 0.0;
  for (int draw = 0; draw < 100; ++draw) {
    const Batch batch = flatopt::testing::random_batch(rng, 1 + rng.uniform_int(16), 4, 3);
    const ParamVector ts = flatopt::testing::random_vector(rng, soft.param_dim(), 1.0);
    worst = std::max(worst, flatopt::testing::relative_error(
                                soft.gradient(ts, batch), finite_diff_gradient(soft, ts, batch, 1e-5)));
    const ParamVector tm = mlp.initial_params(rng);
    worst = std::max(worst, flatopt::testing::relative_error(
                                mlp.gradient(tm, batch), finite_diff_gradient(mlp, tm, batch, 1e-4)));
  }
  const double secs = seconds_since(start);
  return {worst < 1e-4 && secs < 30.0, fmt("max relative error %.3g over 200 checks, %.2fs", worst, secs)};
}

Verdict geometry() {
  GaussianStreamSpec spec;
  spec.dim = 4;
  spec.classes = 4;
  const TaskStream stream = make_gaussian_stream(spec);
  MlpObjective mlp({4, 16, 4});
  Rng rng(7);
  ParamVector theta = mlp.initial_params(rng);
  const auto batches = fixed_batches(stream.tasks[0], 16);
  OptimizerConfig cfg;
  cfg.trigger_on = false;  // every step exercises both branches
  TurboState state = make_state(cfg);
  std::size_t cached = 0, surrogate = 0, violations = 0;
  double worst_cos = 0.0, worst_ulps = 0.0;
  auto ulps = [](double got, double want) {
    return std::abs(got - want) / (std::nextafter(want, INFINITY) - want);
  };
  for (int s = 0; s < 1000; ++s) {
    StepResult r = turbo_step(mlp, theta, batches[static_cast<std::size_t>(s) % batches.size()], cfg, state);
    const auto& b = r.bundle;
    for (const auto& [v, ref] : {std::pair{b.g_vs, b.g}, std::pair{b.g_vf, b.g_0}}) {
      if (!v) continue;
      ++cached;
      const double c = std::abs(dot(*v, *ref)) / (l2_norm(*v) * l2_norm(*ref));
      worst_cos = std::max(worst_cos, c);
      violations += c > 1e-8;
    }
    for (const auto& [on, out, ref] : {std::tuple{b.sharp_simulated, b.g_s, b.g},
                                       std::tuple{b.flat_simulated, b.g_f, b.g_0}}) {
      if (!on) continue;
      ++surrogate;
      const double u = ulps(l2_norm(subtract(*out, *ref)), cfg.beta * l2_norm(*ref));
      worst_ulps = std::max(worst_ulps, u);
      violations += u > 4.0;
    }
    theta = std::move(r.theta);
  }
  return {violations == 0 && cached > 0 && surrogate > 0,
          fmt("%zu cached components, worst |cos| %.2g; %zu surrogate reconstructions, worst %.1f ulps",
              cached, worst_cos, surrogate, worst_ulps)};
}

Verdict stability_ordering() {
  const TaskStream stream = make_gaussian_stream(GaussianStreamSpec{});
  MlpObjective mlp({stream.feature_dim, 16, stream.total_classes});
  // C-Flat refreshes every component on every step, so each series holds one
  // sample per step and the 5-step distance is literally five steps back.
  OptimizerConfig cfg;
  cfg.mode = Mode::CFlat;
  TraceBuffer trace(5);
  run_experiment(stream, mlp, cfg, Protocol{}, &trace);
  const double vf = median(trace.distances_of(Series::Gvf));
  const double vs = median(trace.distances_of(Series::Gvs));
  const double g0 = median(trace.distances_of(Series::G0));
  return {vf < vs && vs < g0,
          fmt("median 5-step distance g_vf %.4g, g_vs %.4g, g_0 %.4g (need g_vf < g_vs < g_0)", vf, vs, g0)};
}

Verdict accuracy_parity() {
  const auto start = Clock::now();
  double turbo_avg = 0.0, cflat_avg = 0.0;
  std::uint64_t turbo_evals = 0, cflat_evals = 0;
  for (std::uint64_t i = 0; i < 5; ++i) {
    GaussianStreamSpec spec;
    spec.seed = 1993 + i;
    const TaskStream stream = make_gaussian_stream(spec);
    MlpObjective mlp({stream.feature_dim, 16, stream.total_classes});
    Protocol protocol;
    protocol.seed = 1993 + i;
    OptimizerConfig turbo;  // k0 5, β 0.8, ρ 0.05, λ 0.2
    turbo.scheduler_on = true;
    turbo.trigger_on = true;
    OptimizerConfig cflat = turbo;
    cflat.mode = Mode::CFlat;
    const RunMetrics t = run_experiment(stream, mlp, turbo, protocol);
    const RunMetrics c = run_experiment(stream, mlp, cflat, protocol);
    turbo_avg += t.avg_acc / 5;
    cflat_avg += c.avg_acc / 5;
    turbo_evals += t.eval_count;
    cflat_evals += c.eval_count;
  }
  const double gap_pp = 100.0 * std::abs(cflat_avg - turbo_avg);
  const double ratio = static_cast<double>(turbo_evals) / static_cast<double>(cflat_evals);
  const double secs = seconds_since(start);
  return {gap_pp <= 1.0 && ratio <= 0.65 && secs < 120.0,
          fmt("Avg turbo %.2f%% vs cflat %.2f%% (gap %.2f pp, limit 1.0), eval ratio %.3f, %.1fs",
              100 * turbo_avg, 100 * cflat_avg, gap_pp, ratio, secs)};
}

Verdict convergence() {
  const double diag[] = {2.0, 8.0};
  const auto q = QuadraticObjective::diagonal(diag, {0.0, 0.0});
  OptimizerConfig turbo;
  const auto trace = flatopt::testing::quadratic_rate_run(q, {1.0, 1.0}, turbo, 0.1, 0.05, 1600);
  std::vector<double> x, y;
  double sum = 0.0;
  for (std::size_t t = 1; t <= trace.g_sq.size(); ++t) {
    sum += trace.g_sq[t - 1];
    if (t == 100 || t == 400 || t == 1600) {
      const double T = static_cast<double>(t);
      x.push_back((1.0 + std::log(T)) / std::sqrt(T));
      y.push_back(sum / T);
    }
  }
  const auto fit = flatopt::testing::fit_line(x, y);
  const bool decreasing = y[0] > y[1] && y[1] > y[2];
  return {decreasing && fit.slope > 0 && fit.r2 > 0.9,
          fmt("running mean |G|^2 at T=100,400,1600: %.4g, %.4g, %.4g; fit slope %.3g, R^2 %.4f",
              y[0], y[1], y[2], fit.slope, fit.r2)};
}

Verdict scheduler_table() {
  std::string got;
  bool ok = true;
  for (int t = 0; t < 10; ++t) {
    const int k = scheduled_k(5, 10.0, t, 10);
    ok = ok && k == 5 + t;
    got += std::to_string(k) + (t < 9 ? "," : "");
  }
  return {ok, "(" + got + ")"};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Verdict determinism() {
  const fs::path dir = fs::temp_directory_path() / "flatopt_acceptance_determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::ofstream(dir / "cfg.json") << R"({
    "dataset": {"kind": "gaussian", "dim": 8, "classes": 10, "initial_classes": 2, "increment": 2, "seed": 1993},
    "model": {"kind": "mlp", "hidden": [16]},
    "optimizer": {"mode": "turbo", "scheduler": true, "trigger": true},
    "protocol": {"epochs": 3, "seed": 1993},
    "diagnostics": {"enabled": true, "window": 5}
  })";
  for (const char* run : {"a", "b"}) {
    const std::string cmd = std::string("\"") + FLATOPT_CLI_PATH + "\" run \"" + (dir / "cfg.json").string() +
                            "\" --out \"" + (dir / run).string() + "\" > /dev/null";
    if (std::system(cmd.c_str()) != 0) return {false, "flatopt run exited nonzero"};
  }
  std::size_t files = 0, differing = 0;
  for (const auto& entry : fs::directory_iterator(dir / "a")) {
    ++files;
    const fs::path other = dir / "b" / entry.path().filename();
    if (!fs::exists(other) || slurp(entry.path()) != slurp(other)) ++differing;
  }
  std::size_t files_b = 0;
  for ([[maybe_unused]] const auto& entry : fs::directory_iterator(dir / "b")) ++files_b;
  fs::remove_all(dir);
  return {files > 0 && differing == 0 && files == files_b,
          fmt("%zu output files compared across two CLI runs, %zu differ", files, differing)};
}

}  // namespace

int main() {
  report(1, "gradient-eval ratio", eval_ratio);
  report(2, "mode-collapse equivalences", equivalences);
  report(3, "quadratic oracle", quadratic_oracle);
  report(4, "finite-difference gradients", finite_differences);
  report(5, "orthogonality and surrogate geometry", geometry);
  report(6, "directional-stability ordering", stability_ordering);
  report(7, "accuracy parity", accuracy_parity);
  report(8, "convergence-rate trend", convergence);
  report(9, "scheduler arithmetic", scheduler_table);
  report(10, "determinism", determinism);
  std::printf("%d of 10 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
