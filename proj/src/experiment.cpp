#include "flatopt/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <mutex>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

#include "flatopt/diagnostics.hpp"
#include "flatopt/io.hpp"

namespace flatopt {

namespace {

using nlohmann::json;

// Walks one JSON object, remembering which keys were consumed so that
// anything left over can be reported as unknown.
class Section {
public:
  Section(const json& node, std::string path) : node_(node), path_(std::move(path)) {
    if (!node_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "must be an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  bool has(const std::string& key) const { return node_.contains(key); }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return node_.at(key);
  }

  Section child(const std::string& key) {
    if (!has(key)) throw ConfigError(field(key), "required section is missing");
    return Section(raw(key), field(key));
  }

  double number(const std::string& key, double fallback) {
    if (!has(key)) return fallback;
    const json& v = raw(key);
    if (!v.is_number()) throw ConfigError(field(key), "expected a number");
    return v.get<double>();
  }

  long long integer(const std::string& key, long long fallback) {
    if (!has(key)) return fallback;
    const json& v = raw(key);
    if (!v.is_number_integer()) throw ConfigError(field(key), "expected an integer");
    return v.get<long long>();
  }

  std::size_t count(const std::string& key, std::size_t fallback, std::size_t min_value) {
    const long long v = integer(key, static_cast<long long>(fallback));
    if (v < static_cast<long long>(min_value)) {
      throw ConfigError(field(key), "must be >= " + std::to_string(min_value));
    }
    return static_cast<std::size_t>(v);
  }

  bool boolean(const std::string& key, bool fallback) {
    if (!has(key)) return fallback;
    const json& v = raw(key);
    if (!v.is_boolean()) throw ConfigError(field(key), "expected true or false");
    return v.get<bool>();
  }

  std::string string(const std::string& key) {
    if (!has(key)) throw ConfigError(field(key), "required field is missing");
    const json& v = raw(key);
    if (!v.is_string()) throw ConfigError(field(key), "expected a string");
    return v.get<std::string>();
  }

  std::vector<double> numbers(const std::string& key) {
    if (!has(key)) return {};
    const json& v = raw(key);
    if (!v.is_array()) throw ConfigError(field(key), "expected an array of numbers");
    std::vector<double> out;
    for (const auto& e : v) {
      if (!e.is_number()) throw ConfigError(field(key), "expected an array of numbers");
      out.push_back(e.get<double>());
    }
    return out;
  }

  void finish() const {
    for (const auto& [key, value] : node_.items()) {
      if (!seen_.contains(key)) throw ConfigError(field(key), "unknown key");
    }
  }

private:
  const json& node_;
  std::string path_;
  std::set<std::string> seen_;
};

std::uint64_t parse_seed(Section& s, const std::string& key, std::uint64_t fallback) {
  const long long v = s.integer(key, static_cast<long long>(fallback));
  if (v < 0) throw ConfigError(s.field(key), "must be >= 0");
  return static_cast<std::uint64_t>(v);
}

DatasetSpec parse_dataset(Section s, const std::filesystem::path& base_dir) {
  DatasetSpec spec;
  const std::string kind = s.string("kind");
  auto& g = spec.gaussian;
  if (kind == "gaussian") {
    spec.kind = DatasetSpec::Kind::Gaussian;
    g.dim = s.count("dim", g.dim, 2);
    g.classes = s.count("classes", g.classes, 2);
    g.samples_per_class = s.count("samples_per_class", g.samples_per_class, 1);
    g.test_per_class = s.count("test_per_class", g.test_per_class, 1);
    g.scale = s.number("scale", g.scale);
    g.noise = s.number("noise", g.noise);
    if (!(g.scale > 0.0)) throw ConfigError(s.field("scale"), "must be > 0");
    if (!(g.noise >= 0.0)) throw ConfigError(s.field("noise"), "must be >= 0");
  } else if (kind == "csv") {
    spec.kind = DatasetSpec::Kind::Csv;
    spec.csv_path = s.string("path");
    if (spec.csv_path.is_relative() && !base_dir.empty()) spec.csv_path = base_dir / spec.csv_path;
  } else {
    throw ConfigError(s.field("kind"), "expected \"gaussian\" or \"csv\"");
  }
  g.initial_classes = s.count("initial_classes", g.initial_classes, 1);
  g.increment = s.count("increment", g.increment, 0);
  g.seed = parse_seed(s, "seed", g.seed);
  if (spec.kind == DatasetSpec::Kind::Gaussian) {
    const std::size_t m = g.initial_classes;
    const std::size_t n = g.increment;
    if (g.classes < m || (g.classes > m && (n == 0 || (g.classes - m) % n != 0))) {
      throw ConfigError(s.field("classes"), "classes must equal initial_classes + increment * (tasks - 1)");
    }
  }
  s.finish();
  return spec;
}

ModelSpec parse_model(Section s) {
  ModelSpec spec;
  const std::string kind = s.string("kind");
  if (kind == "softmax_linear") {
    spec.kind = ModelSpec::Kind::SoftmaxLinear;
  } else if (kind == "mlp") {
    spec.kind = ModelSpec::Kind::Mlp;
    for (double h : s.numbers("hidden")) {
      if (!(h >= 1.0) || h != std::floor(h)) throw ConfigError(s.field("hidden"), "widths must be positive integers");
      spec.hidden.push_back(static_cast<std::size_t>(h));
    }
    if (spec.hidden.empty()) throw ConfigError(s.field("hidden"), "mlp needs at least one hidden width");
  } else if (kind == "quadratic") {
    spec.kind = ModelSpec::Kind::Quadratic;
    spec.eigenvalues = s.numbers("eigenvalues");
    if (spec.eigenvalues.empty()) throw ConfigError(s.field("eigenvalues"), "required for quadratic");
    for (double e : spec.eigenvalues) {
      if (!(e >= 0.0)) throw ConfigError(s.field("eigenvalues"), "must be >= 0 (positive semi-definite)");
    }
    spec.b = s.numbers("b");
    if (spec.b.empty()) spec.b.assign(spec.eigenvalues.size(), 0.0);
    spec.init = s.numbers("init");
    if (spec.init.empty()) spec.init.assign(spec.eigenvalues.size(), 1.0);
    if (spec.b.size() != spec.eigenvalues.size()) throw ConfigError(s.field("b"), "dimension must match eigenvalues");
    if (spec.init.size() != spec.eigenvalues.size()) throw ConfigError(s.field("init"), "dimension must match eigenvalues");
    spec.steps = s.count("steps", spec.steps, 1);
  } else {
    throw ConfigError(s.field("kind"), "expected \"softmax_linear\", \"mlp\" or \"quadratic\"");
  }
  s.finish();
  return spec;
}

OptimizerConfig parse_optimizer(Section s) {
  OptimizerConfig cfg;
  const std::string mode = s.string("mode");
  const auto parsed = parse_mode(mode);
  if (!parsed) throw ConfigError(s.field("mode"), "unknown mode '" + mode + "'");
  cfg.mode = *parsed;
  cfg.lr = s.number("lr", cfg.lr);
  cfg.rho = s.number("rho", cfg.rho);
  if (s.has("rho_prime")) cfg.rho_prime = s.number("rho_prime", cfg.rho);
  cfg.lambda = s.number("lambda", cfg.lambda);
  cfg.beta = s.number("beta", cfg.beta);
  cfg.delta = s.number("delta", cfg.delta);
  const long long k0 = s.integer("k0", cfg.k0);
  if (k0 < 1 || k0 > std::numeric_limits<int>::max()) throw ConfigError(s.field("k0"), "must be >= 1");
  cfg.k0 = static_cast<int>(k0);
  cfg.c = s.number("c", cfg.c);
  if (s.has("m")) {
    const json& v = s.raw("m");
    if (v.is_string() && v.get<std::string>() == "inf") {
      cfg.m = std::numeric_limits<double>::infinity();
    } else if (v.is_number()) {
      cfg.m = v.get<double>();
    } else {
      throw ConfigError(s.field("m"), "expected a number or \"inf\"");
    }
  }
  cfg.scheduler_on = s.boolean("scheduler", cfg.scheduler_on);
  cfg.trigger_on = s.boolean("trigger", cfg.trigger_on);
  cfg.strict_alg1 = s.boolean("strict_alg1", cfg.strict_alg1);
  s.finish();
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    const std::string what = e.what();
    const auto colon = what.find(':');
    const std::string key = what.substr(0, colon);
    throw ConfigError(s.field(key), what.substr(colon == std::string::npos ? 0 : colon + 2));
  }
  return cfg;
}

Protocol parse_protocol(Section s) {
  Protocol p;
  p.epochs = s.count("epochs", p.epochs, 0);
  p.batch_size = s.count("batch_size", p.batch_size, 1);
  p.replay_per_class = s.count("replay_per_class", p.replay_per_class, 0);
  p.seed = parse_seed(s, "seed", p.seed);
  s.finish();
  return p;
}

DiagnosticsSpec parse_diagnostics(Section s) {
  DiagnosticsSpec d;
  d.enabled = s.boolean("enabled", d.enabled);
  d.window = s.count("window", d.window, 1);
  s.finish();
  return d;
}

void write_json(const std::filesystem::path& path, const json& doc) {
  write_file_atomic(path, doc.dump(2) + "\n");
}

std::string hex64(std::uint64_t v) {
  std::ostringstream out;
  out << std::hex << v;
  return out.str();
}

void write_run_outputs(const ExperimentConfig& cfg, const TaskStream& stream,
                       const RunMetrics& metrics, const std::filesystem::path& dir, bool timing) {
  {
    std::ostringstream out;
    out << "stage,seen_classes,acc_seen,evals,steps\n";
    std::size_t seen_classes = 0;
    for (std::size_t t = 0; t < metrics.accuracy.size(); ++t) {
      seen_classes += stream.tasks[t].classes.size();
      out << t << ',' << seen_classes << ',' << format_real(metrics.stage_accuracy[t]) << ','
          << metrics.stage_evals[t] << ',' << metrics.stage_steps[t] << '\n';
    }
    write_file_atomic(dir / "metrics.csv", out.str());
  }
  {
    std::ostringstream out;
    out << "eval_task,after_task,accuracy\n";
    for (std::size_t after = 0; after < metrics.accuracy.size(); ++after) {
      for (std::size_t e = 0; e <= after; ++e) {
        out << e << ',' << after << ',' << format_real(metrics.accuracy[e][after]) << '\n';
      }
    }
    write_file_atomic(dir / "accuracy_matrix.csv", out.str());
  }
  json summary = {
      {"avg_acc", metrics.avg_acc},
      {"last_acc", metrics.last_acc},
      {"eval_count", metrics.eval_count},
      {"steps", metrics.steps},
      {"batch_hash", hex64(metrics.batch_hash)},
      {"config", cfg.echo},
  };
  if (timing) {
    summary["seconds"] = metrics.seconds;
    summary["steps_per_s"] = metrics.steps_per_second;
  }
  write_json(dir / "summary.json", summary);
}

int run_quadratic(const ExperimentConfig& cfg, const std::filesystem::path& dir, bool timing,
                  std::ostream& out) {
  const auto& spec = cfg.model;
  const auto obj = QuadraticObjective::diagonal(spec.eigenvalues, spec.b);
  OptimizerConfig opt = cfg.optimizer;
  TurboState state = make_state(opt);
  ParamVector theta(spec.init);
  const Batch none;
  std::optional<TraceBuffer> trace;
  if (cfg.diagnostics.enabled) trace.emplace(cfg.diagnostics.window);

  std::ostringstream csv;
  csv << "step,loss,grad_sq,evals\n";
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t s = 0; s < spec.steps; ++s) {
    StepResult step = optimizer_step(obj, theta, none, opt, state);
    theta = std::move(step.theta);
    if (trace) record_step(step.bundle, *trace);
    csv << s << ',' << format_real(obj.loss(theta, none)) << ','
        << format_real(squared_norm(obj.gradient(theta, none))) << ',' << state.eval_counter << '\n';
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_file_atomic(dir / "metrics.csv", csv.str());
  json summary = {{"final_loss", obj.loss(theta, none)},
                  {"eval_count", state.eval_counter},
                  {"steps", spec.steps},
                  {"config", cfg.echo}};
  if (timing) {
    summary["seconds"] = seconds;
    summary["steps_per_s"] = seconds > 0 ? static_cast<double>(spec.steps) / seconds : 0.0;
  }
  write_json(dir / "summary.json", summary);
  if (trace) trace->write_csvs(dir);
  out << "final_loss=" << format_real(obj.loss(theta, none)) << " evals=" << state.eval_counter << '\n';
  return 0;
}

template <typename Fn>
int guarded(std::ostream& err, Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

void require_classifier(const ExperimentConfig& cfg) {
  if (cfg.model.kind == ModelSpec::Kind::Quadratic) {
    throw ConfigError("model.kind", "compare and sweep need a classifier model");
  }
}

}  // namespace

ExperimentConfig parse_config(const nlohmann::json& doc, const std::filesystem::path& base_dir) {
  Section root(doc, "");
  ExperimentConfig cfg;
  cfg.model = parse_model(root.child("model"));
  if (root.has("dataset")) {
    cfg.dataset = parse_dataset(root.child("dataset"), base_dir);
  } else if (cfg.model.kind != ModelSpec::Kind::Quadratic) {
    throw ConfigError("dataset", "required section is missing");
  }
  cfg.optimizer = parse_optimizer(root.child("optimizer"));
  if (root.has("protocol")) cfg.protocol = parse_protocol(root.child("protocol"));
  if (root.has("diagnostics")) cfg.diagnostics = parse_diagnostics(root.child("diagnostics"));
  root.finish();
  cfg.echo = doc;
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("<file>", "cannot read " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("<file>", std::string("invalid JSON: ") + e.what());
  }
  return parse_config(doc, path.parent_path());
}

TaskStream build_stream(const ExperimentConfig& cfg) {
  if (!cfg.dataset) throw ConfigError("dataset", "required section is missing");
  const auto& d = *cfg.dataset;
  if (d.kind == DatasetSpec::Kind::Gaussian) return make_gaussian_stream(d.gaussian);
  return load_csv_stream(d.csv_path, d.gaussian.initial_classes, d.gaussian.increment, d.gaussian.seed);
}

std::unique_ptr<Classifier> build_classifier(const ExperimentConfig& cfg, const TaskStream& stream) {
  switch (cfg.model.kind) {
    case ModelSpec::Kind::SoftmaxLinear:
      return std::make_unique<SoftmaxLinearObjective>(stream.feature_dim, stream.total_classes);
    case ModelSpec::Kind::Mlp: {
      std::vector<std::size_t> dims{stream.feature_dim};
      dims.insert(dims.end(), cfg.model.hidden.begin(), cfg.model.hidden.end());
      dims.push_back(stream.total_classes);
      return std::make_unique<MlpObjective>(std::move(dims));
    }
    case ModelSpec::Kind::Quadratic: break;
  }
  throw ConfigError("model.kind", "quadratic is not a classifier");
}

std::vector<CompareRow> run_compare(const ExperimentConfig& cfg, const std::vector<Mode>& modes) {
  const TaskStream stream = build_stream(cfg);
  const auto model = build_classifier(cfg, stream);
  std::vector<CompareRow> rows;
  for (Mode mode : modes) {
    OptimizerConfig opt = cfg.optimizer;
    opt.mode = mode;
    rows.push_back({mode, run_experiment(stream, *model, opt, cfg.protocol)});
  }
  return rows;
}

std::optional<SweepParam> parse_sweep_param(std::string_view name) {
  for (SweepParam p : {SweepParam::Beta, SweepParam::K0, SweepParam::M, SweepParam::Rho, SweepParam::Lambda}) {
    if (to_string(p) == name) return p;
  }
  return std::nullopt;
}

std::string_view to_string(SweepParam p) {
  switch (p) {
    case SweepParam::Beta: return "beta";
    case SweepParam::K0: return "k0";
    case SweepParam::M: return "m";
    case SweepParam::Rho: return "rho";
    case SweepParam::Lambda: return "lambda";
  }
  return "?";
}

ExperimentConfig with_param(const ExperimentConfig& cfg, SweepParam p, double value) {
  ExperimentConfig out = cfg;
  auto& o = out.optimizer;
  switch (p) {
    case SweepParam::Beta: o.beta = value; break;
    case SweepParam::K0:
      if (value != std::floor(value)) throw ConfigError("optimizer.k0", "sweep values must be integers");
      o.k0 = static_cast<int>(value);
      break;
    case SweepParam::M: o.m = value; break;
    case SweepParam::Rho: o.rho = value; break;
    case SweepParam::Lambda: o.lambda = value; break;
  }
  try {
    o.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("optimizer." + std::string(to_string(p)), e.what());
  }
  return out;
}

std::vector<SweepRow> run_sweep(const ExperimentConfig& cfg, SweepParam p,
                                const std::vector<double>& values, unsigned threads) {
  if (values.empty()) throw ConfigError("values", "need at least one value");
  std::vector<ExperimentConfig> configs;
  for (double v : values) configs.push_back(with_param(cfg, p, v));

  const TaskStream stream = build_stream(cfg);
  const auto model = build_classifier(cfg, stream);
  std::vector<SweepRow> rows(values.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < values.size(); i = next++) {
      try {
        rows[i] = {values[i], run_experiment(stream, *model, configs[i].optimizer, cfg.protocol)};
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const unsigned n = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(values.size())));
  std::vector<std::jthread> pool;
  for (unsigned t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  pool.clear();
  if (failure) std::rethrow_exception(failure);
  return rows;
}

unsigned sweep_thread_cap() {
  unsigned cap = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("FLATOPT_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v >= 1) cap = static_cast<unsigned>(v);
  }
  return cap;
}

int cmd_validate(const std::filesystem::path& config, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    load_config(config);
    out << config.string() << ": ok\n";
    return 0;
  });
}

int cmd_run(const std::filesystem::path& config, const std::filesystem::path& out_dir, bool timing,
            std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const ExperimentConfig cfg = load_config(config);
    std::filesystem::create_directories(out_dir);
    if (cfg.model.kind == ModelSpec::Kind::Quadratic) return run_quadratic(cfg, out_dir, timing, out);

    const TaskStream stream = build_stream(cfg);
    const auto model = build_classifier(cfg, stream);
    std::optional<TraceBuffer> trace;
    if (cfg.diagnostics.enabled) trace.emplace(cfg.diagnostics.window);
    const RunMetrics metrics = run_experiment(stream, *model, cfg.optimizer, cfg.protocol,
                                              trace ? &*trace : nullptr);
    write_run_outputs(cfg, stream, metrics, out_dir, timing);
    if (trace) trace->write_csvs(out_dir);
    out << "avg_acc=" << format_real(metrics.avg_acc) << " last_acc=" << format_real(metrics.last_acc)
        << " evals=" << metrics.eval_count << " steps=" << metrics.steps << '\n';
    return 0;
  });
}

int cmd_compare(const std::filesystem::path& config, const std::vector<std::string>& mode_names,
                const std::filesystem::path& out_dir, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const ExperimentConfig cfg = load_config(config);
    require_classifier(cfg);
    if (mode_names.empty()) throw ConfigError("--modes", "need at least one mode");
    std::vector<Mode> modes;
    for (const auto& name : mode_names) {
      const auto m = parse_mode(name);
      if (!m) throw ConfigError("--modes", "unknown mode '" + name + "'");
      modes.push_back(*m);
    }
    std::filesystem::create_directories(out_dir);
    const auto rows = run_compare(cfg, modes);
    std::ostringstream csv;
    csv << "mode,avg,last,evals,evals_vs_sgd,steps_per_s\n";
    for (const auto& row : rows) {
      const auto& m = row.metrics;
      // SGD spends exactly one evaluation per step.
      const double vs_sgd = static_cast<double>(m.eval_count) / static_cast<double>(m.steps);
      csv << to_string(row.mode) << ',' << format_real(m.avg_acc) << ',' << format_real(m.last_acc)
          << ',' << m.eval_count << ',' << format_real(vs_sgd) << ','
          << format_real(m.steps_per_second) << '\n';
      out << to_string(row.mode) << ": avg=" << format_real(m.avg_acc) << " last="
          << format_real(m.last_acc) << " evals=" << m.eval_count << " batch_hash="
          << hex64(m.batch_hash) << '\n';
    }
    write_file_atomic(out_dir / "compare.csv", csv.str());
    return 0;
  });
}

int cmd_sweep(const std::filesystem::path& config, const std::string& param,
              const std::vector<double>& values, const std::filesystem::path& out_dir,
              std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const ExperimentConfig cfg = load_config(config);
    require_classifier(cfg);
    const auto p = parse_sweep_param(param);
    if (!p) throw ConfigError("--param", "expected one of beta, k0, m, rho, lambda");
    std::filesystem::create_directories(out_dir);
    const auto rows = run_sweep(cfg, *p, values, sweep_thread_cap());
    std::ostringstream csv;
    csv << "param,value,avg,last,evals\n";
    for (const auto& row : rows) {
      csv << param << ',' << format_real(row.value) << ',' << format_real(row.metrics.avg_acc) << ','
          << format_real(row.metrics.last_acc) << ',' << row.metrics.eval_count << '\n';
      out << param << '=' << format_real(row.value) << ": avg=" << format_real(row.metrics.avg_acc)
          << " evals=" << row.metrics.eval_count << '\n';
    }
    write_file_atomic(out_dir / "sweep.csv", csv.str());
    return 0;
  });
}

}  // namespace flatopt
