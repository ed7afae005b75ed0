#pragma once

// Class-incremental continual-learning harness.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "flatopt/numcore.hpp"
#include "flatopt/optim.hpp"

namespace flatopt {

class TraceBuffer;

struct Task {
  Batch train;
  Batch test;
  std::vector<std::size_t> classes;  // class ids introduced by this task
};

/// "B-m Inc-n": task 0 holds m classes, every later task n new classes.
struct TaskStream {
  std::vector<Task> tasks;
  std::size_t total_classes = 0;
  std::size_t feature_dim = 0;
  std::size_t initial_classes = 0;  // m
  std::size_t increment = 0;        // n

  std::size_t num_tasks() const noexcept { return tasks.size(); }
};

struct GaussianStreamSpec {
  std::size_t dim = 8;
  std::size_t classes = 20;
  std::size_t initial_classes = 2;
  std::size_t increment = 2;
  std::size_t samples_per_class = 100;  // training samples per class
  std::size_t test_per_class = 25;
  double scale = 4.0;  // radius of the sphere the class means sit on
  double noise = 1.0;  // per-coordinate standard deviation
  std::uint64_t seed = 1993;
};

/// Throws std::invalid_argument for an inconsistent split.
TaskStream make_gaussian_stream(const GaussianStreamSpec& spec);

/// Header `f0,...,f{d-1},label`. Rows of each class are split 80/20 by order
/// (the last floor(count/5) rows go to test). Errors carry the line number.
TaskStream load_csv_stream(const std::filesystem::path& path, std::size_t initial_classes,
                           std::size_t increment, std::uint64_t seed);

/// Keeps the first `per_class` samples seen for every class.
class ReplayBuffer {
public:
  explicit ReplayBuffer(std::size_t per_class = 0) : per_class_(per_class) {}

  void add_task(const Task& task);
  std::size_t size() const noexcept { return exemplars_.size(); }
  std::size_t per_class() const noexcept { return per_class_; }
  const Batch& exemplars() const noexcept { return exemplars_; }

private:
  std::size_t per_class_;
  Batch exemplars_;
};

struct Protocol {
  std::size_t epochs = 5;
  std::size_t batch_size = 16;
  std::size_t replay_per_class = 20;
  std::uint64_t seed = 1993;
};

struct StepEvent {
  int task = 0;
  long step = 0;  // global step index
  bool sharp_triggered = false;
  bool flat_triggered = false;
  bool sharp_computed = false;
  bool flat_computed = false;
  int evals = 0;
};

struct TrainTaskResult {
  std::size_t steps = 0;
  std::uint64_t evals = 0;
};

/// Runs epochs x ceil(|train ∪ replay| / batch_size) optimizer steps over the
/// union of the task's training rows and the replay exemplars, shuffled with
/// a seed derived from (protocol.seed, task, epoch). Adds the task to the
/// replay buffer afterwards. `events` and `trace` are optional sinks.
TrainTaskResult train_task(const Objective& obj, ParamVector& theta, const Task& task,
                           int task_index, ReplayBuffer& replay, const OptimizerConfig& cfg,
                           TurboState& state, const Protocol& protocol,
                           std::vector<StepEvent>* events = nullptr, TraceBuffer* trace = nullptr,
                           std::uint64_t* batch_hash = nullptr, long step_offset = 0);

struct EvalResult {
  std::vector<double> per_task;  // accuracy on each seen task's test rows
  double overall = 0.0;          // accuracy over the pooled test rows
};

/// Argmax over logits restricted to the classes of the given tasks.
EvalResult evaluate(const Classifier& model, const ParamVector& theta,
                    std::span<const Task> tasks_seen);

struct RunMetrics {
  // accuracy[t_eval][t_after], populated for t_eval <= t_after.
  std::vector<std::vector<double>> accuracy;
  std::vector<double> stage_accuracy;  // accuracy on all seen classes after each stage
  std::vector<std::uint64_t> stage_evals;
  std::vector<std::size_t> stage_steps;
  double avg_acc = 0.0;
  double last_acc = 0.0;
  std::uint64_t eval_count = 0;
  std::size_t steps = 0;
  double seconds = 0.0;
  double steps_per_second = 0.0;
  std::uint64_t batch_hash = 0;  // FNV-1a over every batch's row order
  std::vector<StepEvent> events;
  ParamVector final_theta;
};

/// Sequential training over every task. cfg.num_tasks is set from the stream.
RunMetrics run_experiment(const TaskStream& stream, const Classifier& model,
                          const OptimizerConfig& cfg, const Protocol& protocol,
                          TraceBuffer* trace = nullptr);

}  // namespace flatopt
