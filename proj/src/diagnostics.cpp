#include "flatopt/diagnostics.hpp"

#include <algorithm>
#include <boost/math/distributions/normal.hpp>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "flatopt/io.hpp"

namespace flatopt {

std::vector<double> correction_ratio(const ParamVector& m, const ParamVector& n) {
  if (m.size() != n.size()) throw std::invalid_argument("correction_ratio: dimension mismatch");
  std::vector<double> out(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    out[i] = std::log(std::abs(m[i] / (n[i] + kRatioEpsilon)));
  }
  // m_i = 0 gives log(0); guard it to the value the ε-regularised numerator would give.
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (!std::isfinite(out[i])) {
      out[i] = std::log(kRatioEpsilon / std::abs(n[i] + kRatioEpsilon));
    }
  }
  return out;
}

std::vector<double> kstep_distance(std::span<const ParamVector> series, std::size_t w) {
  if (w < 1) throw std::invalid_argument("kstep_distance: window must be >= 1");
  std::vector<double> out;
  for (std::size_t j = w; j < series.size(); ++j) {
    out.push_back(l2_norm(subtract(series[j], series[j - w])));
  }
  return out;
}

std::vector<QQPair> qq_export(std::span<const double> samples) {
  const std::size_t n = samples.size();
  if (n < 10) throw std::invalid_argument("qq_export: need at least 10 samples");
  double mean = 0.0;
  for (double v : samples) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : samples) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  const double sd = std::sqrt(var);
  if (!(sd > 0.0)) throw std::invalid_argument("qq_export: zero variance");

  std::vector<double> sorted(samples.begin(), samples.end());
  std::sort(sorted.begin(), sorted.end());
  const boost::math::normal_distribution<double> standard;
  std::vector<QQPair> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double p = (static_cast<double>(i) + 0.5) / static_cast<double>(n);
    out[i] = {(sorted[i] - mean) / sd, boost::math::quantile(standard, p)};
  }
  return out;
}

std::string_view to_string(Series s) {
  switch (s) {
    case Series::G: return "g";
    case Series::G0: return "g0";
    case Series::Gvs: return "g_vs";
    case Series::Gvf: return "g_vf";
  }
  return "?";
}

std::string_view to_string(RatioPair p) {
  return p == RatioPair::SharpVsG ? "gs_minus_g__g" : "gf__gs";
}

void Histogram::add(double v) {
  const double width = (kHi - kLo) / static_cast<double>(kBins);
  double pos = std::floor((v - kLo) / width);
  pos = std::clamp(pos, 0.0, static_cast<double>(kBins - 1));
  if (std::isnan(v)) return;
  ++counts[static_cast<std::size_t>(pos)];
}

std::uint64_t Histogram::total() const {
  std::uint64_t t = 0;
  for (auto c : counts) t += c;
  return t;
}

TraceBuffer::TraceBuffer(std::size_t window) : window_(window) {
  if (window_ < 1) throw std::invalid_argument("TraceBuffer: window must be >= 1");
}

void TraceBuffer::begin_task(int task) {
  task_ = task;
  for (auto& r : rings_) r.clear();
}

void TraceBuffer::push_series(Series s, const ParamVector& v, long step) {
  auto& ring = rings_[static_cast<std::size_t>(s)];
  if (ring.size() == window_) {
    distances_.push_back({step, s, l2_norm(subtract(v, ring.front()))});
    ring.pop_front();
  }
  ring.push_back(v);
}

std::vector<double> TraceBuffer::distances_of(Series s) const {
  std::vector<double> out;
  for (const auto& row : distances_) {
    if (row.series == s) out.push_back(row.distance);
  }
  return out;
}

std::vector<double> TraceBuffer::scalar_series_g_sq() const {
  std::vector<double> out;
  out.reserve(scalars_.size());
  for (const auto& row : scalars_) out.push_back(row.g_sq);
  return out;
}

std::vector<double> TraceBuffer::scalar_series_g0_sq() const {
  std::vector<double> out;
  for (const auto& row : scalars_) {
    if (row.g0_sq) out.push_back(*row.g0_sq);
  }
  return out;
}

void record_step(const GradientBundle& bundle, TraceBuffer& buffer) {
  const long step = buffer.step_++;
  ScalarRow row;
  row.step = step;
  row.task = buffer.task_;
  row.triggered_s = bundle.sharp_triggered;
  row.triggered_f = bundle.flat_triggered;
  row.cached = bundle.sharp_computed || bundle.flat_computed;

  if (bundle.g) {
    row.g_sq = squared_norm(*bundle.g);
    buffer.push_series(Series::G, *bundle.g, step);
  }
  if (bundle.g_0) {
    row.g0_sq = squared_norm(*bundle.g_0);
    buffer.push_series(Series::G0, *bundle.g_0, step);
  }
  if (bundle.g_vs) buffer.push_series(Series::Gvs, *bundle.g_vs, step);
  if (bundle.g_vf) buffer.push_series(Series::Gvf, *bundle.g_vf, step);

  if (bundle.g && bundle.g_s) {
    const ParamVector increment = subtract(*bundle.g_s, *bundle.g);
    row.sharp_increment = l2_norm(increment);
    auto& hist = buffer.hist_[{RatioPair::SharpVsG, buffer.epoch_}];
    for (double r : correction_ratio(increment, *bundle.g)) hist.add(r);
  }
  if (bundle.g_f) {
    row.gf_norm = l2_norm(*bundle.g_f);
    if (bundle.g_s) {
      auto& hist = buffer.hist_[{RatioPair::FlatVsGs, buffer.epoch_}];
      for (double r : correction_ratio(*bundle.g_f, *bundle.g_s)) hist.add(r);
    }
  }
  buffer.scalars_.push_back(row);
}

namespace {

std::string opt_cell(const std::optional<double>& v) { return v ? format_real(*v) : ""; }

}  // namespace

void TraceBuffer::write_csvs(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  {
    std::ostringstream out;
    out << "step,task,g_sq,g0_sq,gs_minus_g_norm,gf_norm,triggered_s,triggered_f,cached\n";
    for (const auto& r : scalars_) {
      out << r.step << ',' << r.task << ',' << format_real(r.g_sq) << ',' << opt_cell(r.g0_sq)
          << ',' << opt_cell(r.sharp_increment) << ',' << opt_cell(r.gf_norm) << ','
          << int(r.triggered_s) << ',' << int(r.triggered_f) << ',' << int(r.cached) << '\n';
    }
    write_file_atomic(dir / "trace_scalars.csv", out.str());
  }
  {
    std::ostringstream out;
    out << "step,series,distance\n";
    for (const auto& r : distances_) {
      out << r.step << ',' << to_string(r.series) << ',' << format_real(r.distance) << '\n';
    }
    write_file_atomic(dir / "trace_distances.csv", out.str());
  }
  {
    std::ostringstream out;
    out << "series,sample_q,normal_q\n";
    const std::pair<const char*, std::vector<double>> qq_inputs[] = {
        {"g_sq", scalar_series_g_sq()}, {"g0_sq", scalar_series_g0_sq()}};
    for (const auto& [name, values] : qq_inputs) {
      std::vector<QQPair> pairs;
      try {
        pairs = qq_export(values);
      } catch (const std::invalid_argument&) {
        continue;  // too few samples or constant series: nothing to plot
      }
      for (const auto& p : pairs) {
        out << name << ',' << format_real(p.sample_q) << ',' << format_real(p.normal_q) << '\n';
      }
    }
    write_file_atomic(dir / "qq.csv", out.str());
  }
  {
    std::ostringstream out;
    out << "pair,epoch,bin_lo,bin_hi,count\n";
    const double width = (Histogram::kHi - Histogram::kLo) / static_cast<double>(Histogram::kBins);
    for (const auto& [key, hist] : hist_) {
      for (std::size_t b = 0; b < Histogram::kBins; ++b) {
        out << to_string(key.first) << ',' << key.second << ','
            << format_real(Histogram::kLo + width * static_cast<double>(b)) << ','
            << format_real(Histogram::kLo + width * static_cast<double>(b + 1)) << ','
            << hist.counts[b] << '\n';
      }
    }
    write_file_atomic(dir / "ratio_hist.csv", out.str());
  }
}

}  // namespace flatopt
