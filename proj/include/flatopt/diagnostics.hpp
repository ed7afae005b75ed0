#pragma once

// Gradient-landscape instrumentation: correction ratios, k-step distances of
// gradient series, per-step scalar traces and Q-Q export.

#include <array>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <map>
#include <string_view>
#include <vector>

#include "flatopt/numcore.hpp"
#include "flatopt/optim.hpp"

namespace flatopt {

inline constexpr double kRatioEpsilon = 1e-12;

/// log(|m_i / (n_i + ε)|), natural log, elementwise.
std::vector<double> correction_ratio(const ParamVector& m, const ParamVector& n);

/// d_j = ‖x_j − x_{j−w}‖ for j >= w.
std::vector<double> kstep_distance(std::span<const ParamVector> series, std::size_t w);

struct QQPair {
  double sample_q;
  double normal_q;
};

/// Standardized order statistics against Φ⁻¹((i − 0.5)/n). Throws
/// std::invalid_argument for fewer than 10 samples or zero variance.
std::vector<QQPair> qq_export(std::span<const double> samples);

enum class Series { G, G0, Gvs, Gvf };
inline constexpr std::array<Series, 4> kAllSeries = {Series::G, Series::G0, Series::Gvs,
                                                     Series::Gvf};
std::string_view to_string(Series s);

enum class RatioPair { SharpVsG, FlatVsGs };  // (g_s − g, g) and (g_f, g_s)
std::string_view to_string(RatioPair p);

struct ScalarRow {
  long step = 0;
  int task = 0;
  double g_sq = 0.0;
  std::optional<double> g0_sq;
  std::optional<double> sharp_increment;  // ‖g_s − g‖
  std::optional<double> gf_norm;          // ‖g_f‖
  bool triggered_s = false;
  bool triggered_f = false;
  bool cached = false;
};

struct DistanceRow {
  long step = 0;
  Series series = Series::G;
  double distance = 0.0;
};

/// Fixed-bin histogram; values outside [lo, hi) land in the edge bins.
struct Histogram {
  static constexpr double kLo = -32.0;
  static constexpr double kHi = 16.0;
  static constexpr std::size_t kBins = 96;
  std::array<std::uint64_t, kBins> counts{};

  void add(double v);
  std::uint64_t total() const;
};

class TraceBuffer {
public:
  explicit TraceBuffer(std::size_t window = 5);

  /// Distances never straddle a task boundary.
  void begin_task(int task);
  void set_epoch(int epoch) noexcept { epoch_ = epoch; }

  std::size_t window() const noexcept { return window_; }
  const std::vector<ScalarRow>& scalars() const noexcept { return scalars_; }
  const std::vector<DistanceRow>& distances() const noexcept { return distances_; }
  std::vector<double> distances_of(Series s) const;
  std::vector<double> scalar_series_g_sq() const;
  std::vector<double> scalar_series_g0_sq() const;
  /// Keyed by (pair, epoch); coordinates are pooled over all steps of the epoch.
  const std::map<std::pair<RatioPair, int>, Histogram>& ratio_histograms() const noexcept {
    return hist_;
  }
  std::size_t recorded_steps() const noexcept { return scalars_.size(); }

  /// Writes trace_scalars.csv, trace_distances.csv, qq.csv and ratio_hist.csv.
  void write_csvs(const std::filesystem::path& dir) const;

private:
  friend void record_step(const GradientBundle& bundle, TraceBuffer& buffer);

  void push_series(Series s, const ParamVector& v, long step);

  std::size_t window_;
  int task_ = 0;
  int epoch_ = 0;
  long step_ = 0;
  std::array<std::deque<ParamVector>, 4> rings_;
  std::vector<ScalarRow> scalars_;
  std::vector<DistanceRow> distances_;
  std::map<std::pair<RatioPair, int>, Histogram> hist_;
};

/// Appends every member present in the bundle to its series.
void record_step(const GradientBundle& bundle, TraceBuffer& buffer);

}  // namespace flatopt
