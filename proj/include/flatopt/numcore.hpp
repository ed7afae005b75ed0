#pragma once

// Vector algebra, deterministic RNG and the differentiable objectives the
// optimizers are exercised on.
//
// Parameter packing (frozen, shared with golden files):
//   softmax-linear: W (classes x features, row-major), then bias (classes).
//   mlp:            for each layer l: W_l (out_l x in_l, row-major), then b_l.

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <vector>

namespace flatopt {

/// Flat parameter point. Dimension is fixed at construction.
class ParamVector {
public:
  ParamVector() = default;
  explicit ParamVector(std::size_t dim, double fill = 0.0) : values_(dim, fill) {}
  explicit ParamVector(std::vector<double> values) : values_(std::move(values)) {}
  ParamVector(std::initializer_list<double> values) : values_(values) {}

  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  double& operator[](std::size_t i) noexcept { return values_[i]; }
  double operator[](std::size_t i) const noexcept { return values_[i]; }

  std::span<double> span() noexcept { return values_; }
  std::span<const double> span() const noexcept { return values_; }
  const std::vector<double>& values() const noexcept { return values_; }

  auto begin() noexcept { return values_.begin(); }
  auto end() noexcept { return values_.end(); }
  auto begin() const noexcept { return values_.begin(); }
  auto end() const noexcept { return values_.end(); }

  bool all_finite() const noexcept;

  friend bool operator==(const ParamVector&, const ParamVector&) = default;

private:
  std::vector<double> values_;
};

/// a*x + y. Throws std::invalid_argument on dimension mismatch.
ParamVector axpy(double a, const ParamVector& x, const ParamVector& y);
/// a*x
ParamVector scale(double a, const ParamVector& x);
/// x - y
ParamVector subtract(const ParamVector& x, const ParamVector& y);
/// Inner product, summed strictly left to right.
double dot(const ParamVector& x, const ParamVector& y);
double l2_norm(const ParamVector& x);
inline double squared_norm(const ParamVector& x) { return dot(x, x); }

/// Rows of features with integer class labels. The quadratic objective
/// ignores its batch, so an empty Batch is a valid argument there.
struct Batch {
  std::vector<double> inputs;  // rows x cols, row-major
  std::vector<std::size_t> labels;
  std::size_t cols = 0;

  Batch() = default;
  Batch(std::vector<double> inputs, std::vector<std::size_t> labels, std::size_t cols);

  std::size_t size() const noexcept { return labels.size(); }
  std::span<const double> row(std::size_t i) const noexcept {
    return {inputs.data() + i * cols, cols};
  }
  void push_back(std::span<const double> x, std::size_t label);
};

/// xoshiro256** seeded through splitmix64. The stream is a pure function of
/// the seed; distributions are implemented here rather than with <random>
/// so that draws are identical across standard libraries.
class Rng {
public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64() noexcept;
  /// Uniform on [0, 1) with 53 random bits.
  double uniform() noexcept;
  /// Uniform integer on [0, n). n must be > 0.
  std::uint64_t uniform_int(std::uint64_t n) noexcept;
  /// Standard normal (Box-Muller, cached pair).
  double normal() noexcept;

  template <typename T>
  void shuffle(std::span<T> items) noexcept {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_int(i));
      std::swap(items[i - 1], items[j]);
    }
  }

private:
  std::uint64_t s_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// One splitmix64 output for x; used to derive independent sub-seeds.
std::uint64_t splitmix64(std::uint64_t x) noexcept;
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) noexcept;

class Objective {
public:
  virtual ~Objective() = default;
  virtual std::size_t param_dim() const = 0;
  virtual double loss(const ParamVector& theta, const Batch& batch) const = 0;
  virtual ParamVector gradient(const ParamVector& theta, const Batch& batch) const = 0;
};

/// An objective that is also a classifier: mean cross-entropy over logits.
class Classifier : public Objective {
public:
  virtual std::size_t feature_dim() const = 0;
  virtual std::size_t num_classes() const = 0;
  virtual void logits(const ParamVector& theta, std::span<const double> x,
                      std::span<double> out) const = 0;
  virtual ParamVector initial_params(Rng& rng) const = 0;
};

/// 0.5 θᵀAθ − bᵀθ
class QuadraticObjective final : public Objective {
public:
  /// `a` is row-major d x d and must be symmetric.
  QuadraticObjective(std::vector<double> a, std::vector<double> b);
  static QuadraticObjective diagonal(std::span<const double> diag, std::vector<double> b);

  std::size_t param_dim() const override { return b_.size(); }
  double loss(const ParamVector& theta, const Batch& batch) const override;
  ParamVector gradient(const ParamVector& theta, const Batch& batch) const override;

  /// A·v
  ParamVector apply(const ParamVector& v) const;
  double entry(std::size_t i, std::size_t j) const { return a_[i * b_.size() + j]; }

private:
  std::vector<double> a_;
  std::vector<double> b_;
};

class SoftmaxLinearObjective final : public Classifier {
public:
  SoftmaxLinearObjective(std::size_t feature_dim, std::size_t classes);

  std::size_t param_dim() const override { return classes_ * (features_ + 1); }
  std::size_t feature_dim() const override { return features_; }
  std::size_t num_classes() const override { return classes_; }

  double loss(const ParamVector& theta, const Batch& batch) const override;
  ParamVector gradient(const ParamVector& theta, const Batch& batch) const override;
  void logits(const ParamVector& theta, std::span<const double> x,
              std::span<double> out) const override;
  ParamVector initial_params(Rng& rng) const override;

private:
  std::size_t features_;
  std::size_t classes_;
};

/// tanh hidden layers, linear output layer feeding softmax cross-entropy.
class MlpObjective final : public Classifier {
public:
  /// layer_dims = {inputs, hidden..., classes}
  explicit MlpObjective(std::vector<std::size_t> layer_dims);

  std::size_t param_dim() const override { return param_dim_; }
  std::size_t feature_dim() const override { return dims_.front(); }
  std::size_t num_classes() const override { return dims_.back(); }
  const std::vector<std::size_t>& layer_dims() const noexcept { return dims_; }

  double loss(const ParamVector& theta, const Batch& batch) const override;
  ParamVector gradient(const ParamVector& theta, const Batch& batch) const override;
  void logits(const ParamVector& theta, std::span<const double> x,
              std::span<double> out) const override;
  ParamVector initial_params(Rng& rng) const override;

  /// Offset of W_l inside θ; b_l follows immediately after W_l.
  std::size_t weight_offset(std::size_t layer) const { return offsets_[layer]; }

private:
  // Forward pass storing every layer's activations; returns the logits layer.
  void forward(const ParamVector& theta, std::span<const double> x,
               std::vector<std::vector<double>>& acts) const;

  std::vector<std::size_t> dims_;
  std::vector<std::size_t> offsets_;
  std::size_t param_dim_ = 0;
};

/// Central differences, one coordinate at a time. Throws std::domain_error if
/// any probed loss is non-finite and std::invalid_argument if h <= 0.
ParamVector finite_diff_gradient(const Objective& obj, const ParamVector& theta,
                                 const Batch& batch, double h);

/// Mean cross-entropy helper shared by the classifiers: returns the loss of
/// one sample and, if `dlogits` is non-empty, writes softmax(z) - onehot(y).
double cross_entropy(std::span<const double> logits, std::size_t label,
                     std::span<double> dlogits);

}  // namespace flatopt
