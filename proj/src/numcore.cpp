#include "flatopt/numcore.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace flatopt {

namespace {

void require_same_dim(const ParamVector& x, const ParamVector& y, const char* op) {
  if (x.size() != y.size()) {
    throw std::invalid_argument(std::string(op) + ": dimension mismatch (" +
                                std::to_string(x.size()) + " vs " +
                                std::to_string(y.size()) + ")");
  }
}

std::uint64_t rotl(std::uint64_t x, int k) noexcept { return (x << k) | (x >> (64 - k)); }

void check_labels(const Batch& batch, std::size_t features, std::size_t classes) {
  if (batch.size() == 0) throw std::invalid_argument("batch is empty");
  if (batch.cols != features) {
    throw std::invalid_argument("batch has " + std::to_string(batch.cols) +
                                " features, objective expects " + std::to_string(features));
  }
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch.labels[i] >= classes) {
      throw std::out_of_range("label " + std::to_string(batch.labels[i]) + " at row " +
                              std::to_string(i) + " outside [0, " + std::to_string(classes) +
                              ")");
    }
  }
}

void check_theta(const ParamVector& theta, std::size_t dim) {
  if (theta.size() != dim) {
    throw std::invalid_argument("parameter vector has dimension " +
                                std::to_string(theta.size()) + ", expected " +
                                std::to_string(dim));
  }
}

}  // namespace

bool ParamVector::all_finite() const noexcept {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

ParamVector axpy(double a, const ParamVector& x, const ParamVector& y) {
  require_same_dim(x, y, "axpy");
  ParamVector out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = a * x[i] + y[i];
  return out;
}

ParamVector scale(double a, const ParamVector& x) {
  ParamVector out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = a * x[i];
  return out;
}

ParamVector subtract(const ParamVector& x, const ParamVector& y) {
  require_same_dim(x, y, "subtract");
  ParamVector out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
  return out;
}

double dot(const ParamVector& x, const ParamVector& y) {
  require_same_dim(x, y, "dot");
  // Compensated left-to-right sum (Ogita, Rump and Oishi's Dot2): products and
  // additions keep their rounding errors, so the result is as accurate as a
  // double-double accumulation. Norm-scaled surrogates depend on this.
  double sum = 0.0;
  double err = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double p = x[i] * y[i];
    const double p_err = std::fma(x[i], y[i], -p);
    const double t = sum + p;
    const double z = t - sum;
    err += ((sum - (t - z)) + (p - z)) + p_err;
    sum = t;
  }
  return sum + err;
}

double l2_norm(const ParamVector& x) { return std::sqrt(dot(x, x)); }

Batch::Batch(std::vector<double> in, std::vector<std::size_t> lab, std::size_t c)
    : inputs(std::move(in)), labels(std::move(lab)), cols(c) {
  if (cols == 0 || inputs.size() != labels.size() * cols) {
    throw std::invalid_argument("batch inputs do not match labels x cols");
  }
}

void Batch::push_back(std::span<const double> x, std::size_t label) {
  if (cols == 0 && labels.empty()) cols = x.size();
  if (x.size() != cols) throw std::invalid_argument("batch row width mismatch");
  inputs.insert(inputs.end(), x.begin(), x.end());
  labels.push_back(label);
}

// --- Rng -------------------------------------------------------------------

std::uint64_t splitmix64(std::uint64_t x) noexcept {
  std::uint64_t z = x + 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) noexcept {
  return splitmix64(splitmix64(splitmix64(seed) ^ a) ^ (b * 0xD1B54A32D192ED03ULL));
}

Rng::Rng(std::uint64_t seed) {
  std::uint64_t x = seed;
  for (auto& s : s_) {
    x += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    s = z ^ (z >> 31);
  }
}

std::uint64_t Rng::next_u64() noexcept {
  const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double Rng::uniform() noexcept {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t Rng::uniform_int(std::uint64_t n) noexcept {
  // Rejection on the top of the range keeps the draw unbiased.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

double Rng::normal() noexcept {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  const double u1 = 1.0 - uniform();  // (0, 1]
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double phi = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(phi);
  has_spare_ = true;
  return r * std::cos(phi);
}

// --- objectives ------------------------------------------------------------

double cross_entropy(std::span<const double> logits, std::size_t label,
                     std::span<double> dlogits) {
  const double zmax = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double z : logits) sum += std::exp(z - zmax);
  const double log_sum = std::log(sum) + zmax;
  if (!dlogits.empty()) {
    for (std::size_t c = 0; c < logits.size(); ++c) {
      dlogits[c] = std::exp(logits[c] - log_sum);
    }
    dlogits[label] -= 1.0;
  }
  return log_sum - logits[label];
}

QuadraticObjective::QuadraticObjective(std::vector<double> a, std::vector<double> b)
    : a_(std::move(a)), b_(std::move(b)) {
  const std::size_t d = b_.size();
  if (d == 0 || a_.size() != d * d) {
    throw std::invalid_argument("quadratic: A must be square with the dimension of b");
  }
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = i + 1; j < d; ++j) {
      if (a_[i * d + j] != a_[j * d + i]) {
        throw std::invalid_argument("quadratic: A must be symmetric");
      }
    }
  }
}

QuadraticObjective QuadraticObjective::diagonal(std::span<const double> diag,
                                                std::vector<double> b) {
  const std::size_t d = diag.size();
  std::vector<double> a(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) a[i * d + i] = diag[i];
  return QuadraticObjective(std::move(a), std::move(b));
}

ParamVector QuadraticObjective::apply(const ParamVector& v) const {
  check_theta(v, b_.size());
  const std::size_t d = b_.size();
  ParamVector out(d);
  for (std::size_t i = 0; i < d; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) acc += a_[i * d + j] * v[j];
    out[i] = acc;
  }
  return out;
}

double QuadraticObjective::loss(const ParamVector& theta, const Batch&) const {
  const ParamVector at = apply(theta);
  double quad = 0.0;
  double lin = 0.0;
  for (std::size_t i = 0; i < b_.size(); ++i) {
    quad += theta[i] * at[i];
    lin += b_[i] * theta[i];
  }
  return 0.5 * quad - lin;
}

ParamVector QuadraticObjective::gradient(const ParamVector& theta, const Batch&) const {
  ParamVector g = apply(theta);
  for (std::size_t i = 0; i < b_.size(); ++i) g[i] -= b_[i];
  return g;
}

SoftmaxLinearObjective::SoftmaxLinearObjective(std::size_t feature_dim, std::size_t classes)
    : features_(feature_dim), classes_(classes) {
  if (features_ < 1) throw std::invalid_argument("softmax-linear: feature_dim must be >= 1");
  if (classes_ < 2) throw std::invalid_argument("softmax-linear: classes must be >= 2");
}

void SoftmaxLinearObjective::logits(const ParamVector& theta, std::span<const double> x,
                                    std::span<double> out) const {
  const double* w = theta.span().data();
  const double* bias = w + classes_ * features_;
  for (std::size_t c = 0; c < classes_; ++c) {
    double z = bias[c];
    for (std::size_t f = 0; f < features_; ++f) z += w[c * features_ + f] * x[f];
    out[c] = z;
  }
}

double SoftmaxLinearObjective::loss(const ParamVector& theta, const Batch& batch) const {
  check_theta(theta, param_dim());
  check_labels(batch, features_, classes_);
  std::vector<double> z(classes_);
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    logits(theta, batch.row(i), z);
    total += cross_entropy(z, batch.labels[i], {});
  }
  return total / static_cast<double>(batch.size());
}

ParamVector SoftmaxLinearObjective::gradient(const ParamVector& theta, const Batch& batch) const {
  check_theta(theta, param_dim());
  check_labels(batch, features_, classes_);
  ParamVector grad(param_dim());
  double* gw = grad.span().data();
  double* gb = gw + classes_ * features_;
  std::vector<double> z(classes_);
  std::vector<double> dz(classes_);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto x = batch.row(i);
    logits(theta, x, z);
    cross_entropy(z, batch.labels[i], dz);
    for (std::size_t c = 0; c < classes_; ++c) {
      for (std::size_t f = 0; f < features_; ++f) gw[c * features_ + f] += dz[c] * x[f];
      gb[c] += dz[c];
    }
  }
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (double& v : grad) v *= inv_n;
  return grad;
}

ParamVector SoftmaxLinearObjective::initial_params(Rng& rng) const {
  ParamVector theta(param_dim());
  const double s = 0.01;
  for (std::size_t i = 0; i < classes_ * features_; ++i) theta[i] = s * rng.normal();
  return theta;
}

MlpObjective::MlpObjective(std::vector<std::size_t> layer_dims) : dims_(std::move(layer_dims)) {
  if (dims_.size() < 2) throw std::invalid_argument("mlp: need at least input and output widths");
  for (std::size_t w : dims_) {
    if (w == 0) throw std::invalid_argument("mlp: layer widths must be >= 1");
  }
  if (dims_.back() < 2) throw std::invalid_argument("mlp: output width (classes) must be >= 2");
  for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
    offsets_.push_back(param_dim_);
    param_dim_ += dims_[l + 1] * (dims_[l] + 1);
  }
}

void MlpObjective::forward(const ParamVector& theta, std::span<const double> x,
                           std::vector<std::vector<double>>& acts) const {
  const std::size_t layers = dims_.size() - 1;
  acts.resize(dims_.size());
  acts[0].assign(x.begin(), x.end());
  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t in = dims_[l];
    const std::size_t out = dims_[l + 1];
    const double* w = theta.span().data() + offsets_[l];
    const double* bias = w + out * in;
    auto& next = acts[l + 1];
    next.resize(out);
    const auto& prev = acts[l];
    for (std::size_t o = 0; o < out; ++o) {
      double z = bias[o];
      for (std::size_t i = 0; i < in; ++i) z += w[o * in + i] * prev[i];
      next[o] = (l + 1 < layers) ? std::tanh(z) : z;
    }
  }
}

void MlpObjective::logits(const ParamVector& theta, std::span<const double> x,
                          std::span<double> out) const {
  std::vector<std::vector<double>> acts;
  forward(theta, x, acts);
  std::copy(acts.back().begin(), acts.back().end(), out.begin());
}

double MlpObjective::loss(const ParamVector& theta, const Batch& batch) const {
  check_theta(theta, param_dim_);
  check_labels(batch, dims_.front(), dims_.back());
  std::vector<std::vector<double>> acts;
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    forward(theta, batch.row(i), acts);
    total += cross_entropy(acts.back(), batch.labels[i], {});
  }
  return total / static_cast<double>(batch.size());
}

ParamVector MlpObjective::gradient(const ParamVector& theta, const Batch& batch) const {
  check_theta(theta, param_dim_);
  check_labels(batch, dims_.front(), dims_.back());
  const std::size_t layers = dims_.size() - 1;
  ParamVector grad(param_dim_);
  std::vector<std::vector<double>> acts;
  std::vector<double> delta;
  std::vector<double> prev_delta;
  for (std::size_t s = 0; s < batch.size(); ++s) {
    forward(theta, batch.row(s), acts);
    delta.assign(dims_.back(), 0.0);
    cross_entropy(acts.back(), batch.labels[s], delta);
    for (std::size_t l = layers; l-- > 0;) {
      const std::size_t in = dims_[l];
      const std::size_t out = dims_[l + 1];
      const double* w = theta.span().data() + offsets_[l];
      double* gw = grad.span().data() + offsets_[l];
      double* gb = gw + out * in;
      const auto& a = acts[l];
      for (std::size_t o = 0; o < out; ++o) {
        for (std::size_t i = 0; i < in; ++i) gw[o * in + i] += delta[o] * a[i];
        gb[o] += delta[o];
      }
      if (l == 0) break;
      // Back through W_l, then through tanh of the layer below (a = tanh(z)).
      prev_delta.assign(in, 0.0);
      for (std::size_t o = 0; o < out; ++o) {
        for (std::size_t i = 0; i < in; ++i) prev_delta[i] += w[o * in + i] * delta[o];
      }
      for (std::size_t i = 0; i < in; ++i) prev_delta[i] *= 1.0 - a[i] * a[i];
      delta.swap(prev_delta);
    }
  }
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (double& v : grad) v *= inv_n;
  return grad;
}

ParamVector MlpObjective::initial_params(Rng& rng) const {
  ParamVector theta(param_dim_);
  for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
    const std::size_t in = dims_[l];
    const std::size_t out = dims_[l + 1];
    const double s = 1.0 / std::sqrt(static_cast<double>(in));
    for (std::size_t k = 0; k < out * in; ++k) theta[offsets_[l] + k] = s * rng.normal();
  }
  return theta;
}

ParamVector finite_diff_gradient(const Objective& obj, const ParamVector& theta,
                                 const Batch& batch, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_gradient: h must be > 0");
  ParamVector probe = theta;
  ParamVector grad(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    probe[i] = theta[i] + h;
    const double up = obj.loss(probe, batch);
    probe[i] = theta[i] - h;
    const double down = obj.loss(probe, batch);
    probe[i] = theta[i];
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw std::domain_error("finite_diff_gradient: non-finite loss at coordinate " +
                              std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

}  // namespace flatopt
