#include "flatopt/clbench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>

#include "flatopt/diagnostics.hpp"

namespace flatopt {

namespace {

std::size_t task_count_for(std::size_t classes, std::size_t m, std::size_t n) {
  if (m == 0 || classes < m) {
    throw std::invalid_argument("split B-" + std::to_string(m) + " Inc-" + std::to_string(n) +
                                " does not fit " + std::to_string(classes) + " classes");
  }
  const std::size_t rest = classes - m;
  if (rest == 0) return 1;
  if (n == 0 || rest % n != 0) {
    throw std::invalid_argument("split B-" + std::to_string(m) + " Inc-" + std::to_string(n) +
                                " does not partition " + std::to_string(classes) + " classes");
  }
  return 1 + rest / n;
}

// Seeded permutation of class ids, cut into B-m Inc-n groups.
std::vector<std::vector<std::size_t>> assign_classes(std::size_t classes, std::size_t m,
                                                     std::size_t n, std::uint64_t seed) {
  const std::size_t tasks = task_count_for(classes, m, n);
  std::vector<std::size_t> order(classes);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, 0xC1A55));
  rng.shuffle(std::span<std::size_t>(order));
  std::vector<std::vector<std::size_t>> groups(tasks);
  std::size_t pos = 0;
  for (std::size_t t = 0; t < tasks; ++t) {
    const std::size_t take = t == 0 ? m : n;
    groups[t].assign(order.begin() + static_cast<long>(pos),
                     order.begin() + static_cast<long>(pos + take));
    pos += take;
  }
  return groups;
}

std::uint64_t fnv1a(std::uint64_t h, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    h ^= (v >> (8 * i)) & 0xFF;
    h *= 0x100000001B3ULL;
  }
  return h;
}

constexpr std::uint64_t kFnvOffset = 0xCBF29CE484222325ULL;

}  // namespace

TaskStream make_gaussian_stream(const GaussianStreamSpec& spec) {
  if (spec.dim < 2) throw std::invalid_argument("gaussian stream: dim must be >= 2");
  if (spec.samples_per_class < 1 || spec.test_per_class < 1) {
    throw std::invalid_argument("gaussian stream: need at least one train and test sample per class");
  }
  const auto groups = assign_classes(spec.classes, spec.initial_classes, spec.increment, spec.seed);

  Rng rng(derive_seed(spec.seed, 0x6A55));
  std::vector<std::vector<double>> means(spec.classes, std::vector<double>(spec.dim));
  for (auto& mean : means) {
    double norm_sq = 0.0;
    for (double& v : mean) {
      v = rng.normal();
      norm_sq += v * v;
    }
    const double s = spec.scale / std::sqrt(norm_sq);
    for (double& v : mean) v *= s;
  }

  TaskStream stream;
  stream.total_classes = spec.classes;
  stream.feature_dim = spec.dim;
  stream.initial_classes = spec.initial_classes;
  stream.increment = spec.increment;
  std::vector<double> x(spec.dim);
  for (const auto& classes : groups) {
    Task task;
    task.classes = classes;
    task.train.cols = task.test.cols = spec.dim;
    for (std::size_t c : classes) {
      for (std::size_t i = 0; i < spec.samples_per_class + spec.test_per_class; ++i) {
        for (std::size_t f = 0; f < spec.dim; ++f) x[f] = means[c][f] + spec.noise * rng.normal();
        (i < spec.samples_per_class ? task.train : task.test).push_back(x, c);
      }
    }
    stream.tasks.push_back(std::move(task));
  }
  return stream;
}

TaskStream load_csv_stream(const std::filesystem::path& path, std::size_t initial_classes,
                           std::size_t increment, std::uint64_t seed) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path.string() + ": cannot open");
  std::string line;
  if (!std::getline(in, line) || line.empty()) {
    throw std::runtime_error(path.string() + ":1: empty file (missing header)");
  }
  std::size_t header_cols = 1 + static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
  if (header_cols < 2) throw std::runtime_error(path.string() + ":1: header needs features and label");
  const std::size_t dim = header_cols - 1;

  std::map<std::size_t, std::vector<std::vector<double>>> rows_by_class;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no) + ": ";
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    if (cells.size() != header_cols) {
      throw std::runtime_error(where + "expected " + std::to_string(header_cols) + " cells, got " +
                               std::to_string(cells.size()));
    }
    std::vector<double> features(dim);
    for (std::size_t f = 0; f < dim; ++f) {
      std::size_t used = 0;
      try {
        features[f] = std::stod(cells[f], &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != cells[f].size() || cells[f].empty() || !std::isfinite(features[f])) {
        throw std::runtime_error(where + "malformed feature '" + cells[f] + "'");
      }
    }
    const std::string& label_cell = cells.back();
    std::size_t used = 0;
    long long label = -1;
    try {
      label = std::stoll(label_cell, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != label_cell.size() || label_cell.empty()) {
      throw std::runtime_error(where + "malformed label '" + label_cell + "'");
    }
    if (label < 0) throw std::runtime_error(where + "unknown label " + label_cell);
    rows_by_class[static_cast<std::size_t>(label)].push_back(std::move(features));
  }
  if (rows_by_class.empty()) throw std::runtime_error(path.string() + ": no data rows");

  const std::size_t classes = rows_by_class.rbegin()->first + 1;
  if (rows_by_class.size() != classes) {
    throw std::runtime_error(path.string() + ": class count mismatch: labels span [0, " +
                             std::to_string(classes) + ") but only " +
                             std::to_string(rows_by_class.size()) + " classes have rows");
  }
  std::vector<std::vector<std::size_t>> groups;
  try {
    groups = assign_classes(classes, initial_classes, increment, seed);
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error(path.string() + ": class count mismatch: " + e.what());
  }

  TaskStream stream;
  stream.total_classes = classes;
  stream.feature_dim = dim;
  stream.initial_classes = initial_classes;
  stream.increment = increment;
  for (const auto& group : groups) {
    Task task;
    task.classes = group;
    task.train.cols = task.test.cols = dim;
    for (std::size_t c : group) {
      const auto& rows = rows_by_class.at(c);
      const std::size_t n_test = rows.size() / 5;
      const std::size_t n_train = rows.size() - n_test;
      for (std::size_t i = 0; i < rows.size(); ++i) {
        (i < n_train ? task.train : task.test).push_back(rows[i], c);
      }
    }
    stream.tasks.push_back(std::move(task));
  }
  return stream;
}

void ReplayBuffer::add_task(const Task& task) {
  if (per_class_ == 0) return;
  std::map<std::size_t, std::size_t> taken;
  for (std::size_t i = 0; i < task.train.size(); ++i) {
    const std::size_t label = task.train.labels[i];
    if (taken[label] < per_class_) {
      ++taken[label];
      exemplars_.push_back(task.train.row(i), label);
    }
  }
}

TrainTaskResult train_task(const Objective& obj, ParamVector& theta, const Task& task,
                           int task_index, ReplayBuffer& replay, const OptimizerConfig& cfg,
                           TurboState& state, const Protocol& protocol,
                           std::vector<StepEvent>* events, TraceBuffer* trace,
                           std::uint64_t* batch_hash, long step_offset) {
  if (protocol.batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  begin_task(state, cfg, task_index);
  if (trace) trace->begin_task(task_index);

  // Pool = current task rows followed by replay exemplars.
  const Batch& own = task.train;
  const Batch& old = replay.exemplars();
  const std::size_t pool = own.size() + old.size();
  auto row_of = [&](std::size_t idx) {
    return idx < own.size() ? std::pair{own.row(idx), own.labels[idx]}
                            : std::pair{old.row(idx - own.size()), old.labels[idx - own.size()]};
  };

  TrainTaskResult result;
  const std::uint64_t evals_before = state.eval_counter;
  const std::size_t steps_per_epoch = (pool + protocol.batch_size - 1) / protocol.batch_size;
  std::vector<std::size_t> order(pool);
  Batch batch;
  for (std::size_t epoch = 0; epoch < protocol.epochs && pool > 0; ++epoch) {
    if (trace) trace->set_epoch(static_cast<int>(task_index * protocol.epochs + epoch));
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(protocol.seed, static_cast<std::uint64_t>(task_index), epoch));
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      const std::size_t lo = s * protocol.batch_size;
      const std::size_t hi = std::min(pool, lo + protocol.batch_size);
      batch = Batch();
      batch.cols = own.cols;
      for (std::size_t i = lo; i < hi; ++i) {
        auto [x, y] = row_of(order[i]);
        batch.push_back(x, y);
        if (batch_hash) *batch_hash = fnv1a(*batch_hash, order[i]);
      }
      StepResult step = optimizer_step(obj, theta, batch, cfg, state);
      theta = std::move(step.theta);
      if (trace) record_step(step.bundle, *trace);
      if (events) {
        const auto& b = step.bundle;
        events->push_back({task_index, step_offset + static_cast<long>(result.steps),
                           b.sharp_triggered, b.flat_triggered, b.sharp_computed,
                           b.flat_computed, b.evals});
      }
      ++result.steps;
    }
  }
  replay.add_task(task);
  result.evals = state.eval_counter - evals_before;
  return result;
}

EvalResult evaluate(const Classifier& model, const ParamVector& theta,
                    std::span<const Task> tasks_seen) {
  std::vector<bool> allowed(model.num_classes(), false);
  for (const auto& task : tasks_seen) {
    for (std::size_t c : task.classes) allowed.at(c) = true;
  }
  EvalResult result;
  std::vector<double> z(model.num_classes());
  std::size_t correct_total = 0;
  std::size_t seen_total = 0;
  for (const auto& task : tasks_seen) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < task.test.size(); ++i) {
      model.logits(theta, task.test.row(i), z);
      std::size_t best = model.num_classes();
      for (std::size_t c = 0; c < z.size(); ++c) {
        if (allowed[c] && (best == model.num_classes() || z[c] > z[best])) best = c;
      }
      if (best == task.test.labels[i]) ++correct;
    }
    result.per_task.push_back(task.test.size() == 0
                                  ? 0.0
                                  : static_cast<double>(correct) / static_cast<double>(task.test.size()));
    correct_total += correct;
    seen_total += task.test.size();
  }
  result.overall = seen_total == 0 ? 0.0
                                   : static_cast<double>(correct_total) / static_cast<double>(seen_total);
  return result;
}

RunMetrics run_experiment(const TaskStream& stream, const Classifier& model,
                          const OptimizerConfig& base_cfg, const Protocol& protocol,
                          TraceBuffer* trace) {
  if (stream.tasks.empty()) throw std::invalid_argument("run_experiment: empty task stream");
  if (stream.feature_dim != model.feature_dim() || stream.total_classes > model.num_classes()) {
    throw std::invalid_argument("run_experiment: model shape does not match the stream");
  }
  OptimizerConfig cfg = base_cfg;
  cfg.num_tasks = static_cast<int>(stream.num_tasks());
  cfg.validate();

  RunMetrics metrics;
  Rng init_rng(derive_seed(protocol.seed, 0x1A17));
  ParamVector theta = model.initial_params(init_rng);
  TurboState state = make_state(cfg);
  ReplayBuffer replay(protocol.replay_per_class);
  metrics.batch_hash = kFnvOffset;

  const auto start = std::chrono::steady_clock::now();
  const std::size_t tasks = stream.num_tasks();
  metrics.accuracy.assign(tasks, std::vector<double>(tasks, 0.0));
  for (std::size_t t = 0; t < tasks; ++t) {
    const auto res = train_task(model, theta, stream.tasks[t], static_cast<int>(t), replay, cfg,
                                state, protocol, &metrics.events, trace, &metrics.batch_hash,
                                static_cast<long>(metrics.steps));
    metrics.steps += res.steps;
    const auto seen = std::span<const Task>(stream.tasks).first(t + 1);
    const EvalResult eval = evaluate(model, theta, seen);
    for (std::size_t e = 0; e <= t; ++e) metrics.accuracy[e][t] = eval.per_task[e];
    metrics.stage_accuracy.push_back(eval.overall);
    metrics.stage_evals.push_back(state.eval_counter);
    metrics.stage_steps.push_back(metrics.steps);
  }
  metrics.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  metrics.eval_count = state.eval_counter;
  metrics.avg_acc = std::accumulate(metrics.stage_accuracy.begin(), metrics.stage_accuracy.end(), 0.0) /
                    static_cast<double>(tasks);
  metrics.last_acc = metrics.stage_accuracy.back();
  metrics.steps_per_second =
      metrics.seconds > 0.0 ? static_cast<double>(metrics.steps) / metrics.seconds : 0.0;
  metrics.final_theta = std::move(theta);
  return metrics;
}

}  // namespace flatopt
