#pragma once

// Learning-curve aggregation across seeds and steps-to-threshold summaries.

#include <algorithm>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "qstac/csv.hpp"
#include "qstac/errors.hpp"

namespace qstac {

struct Curve {
  std::string label;
  std::vector<long> steps;
  std::vector<double> values;
};

/// (step, mean) pairs from an eval.csv or curves_agg.csv file.
inline Curve read_curve(const std::filesystem::path& path, const std::string& label = {}) {
  const CsvTable t = read_csv(path);
  const int sc = t.column("step");
  const int mc = t.column("mean");
  Curve c;
  c.label = label.empty() ? path.string() : label;
  for (const auto& r : t.rows) {
    if (r[sc].empty() || r[mc].empty()) continue;  // warning rows carry no data
    c.steps.push_back(static_cast<long>(parse_number(r[sc], path.string())));
    c.values.push_back(parse_number(r[mc], path.string()));
  }
  for (std::size_t i = 1; i < c.steps.size(); ++i)
    if (c.steps[i] <= c.steps[i - 1]) throw FormatError("'" + path.string() + "' steps are not increasing");
  return c;
}

struct AggregatePoint {
  long step = 0;
  double mean = 0.0;
  double min = 0.0;
  double max = 0.0;
  int n = 0;
};

/// Mean/min/max across curves at the eval steps shared by all of them.
inline std::vector<AggregatePoint> aggregate_curves(const std::vector<Curve>& curves) {
  std::vector<AggregatePoint> out;
  if (curves.empty()) return out;
  std::map<long, std::vector<double>> at;
  for (const Curve& c : curves)
    for (std::size_t i = 0; i < c.steps.size(); ++i) at[c.steps[i]].push_back(c.values[i]);
  for (auto& [step, vals] : at) {
    if (vals.size() != curves.size()) continue;
    std::sort(vals.begin(), vals.end());  // makes the sum independent of seed order
    AggregatePoint p;
    p.step = step;
    p.n = static_cast<int>(vals.size());
    double s = 0.0;
    for (double v : vals) s += v;
    p.mean = s / p.n;
    p.min = vals.front();
    p.max = vals.back();
    out.push_back(p);
  }
  return out;
}

/// Trailing moving average over `window` points; the first points average what is available.
inline std::vector<double> smooth_trailing(const std::vector<double>& v, int window) {
  if (window < 1) throw ConfigError("smoothing window must be >= 1");
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const std::size_t lo = i + 1 >= static_cast<std::size_t>(window) ? i + 1 - window : 0;
    double s = 0.0;
    for (std::size_t k = lo; k <= i; ++k) s += v[k];
    out[i] = s / static_cast<double>(i - lo + 1);
  }
  return out;
}

struct EfficiencyRow {
  std::string label;
  std::optional<long> step;      // first crossing, if any
  std::optional<long> index;     // eval point index of the crossing (0-based)
  double percent_of_budget = 0.0;
  long budget = 0;
};

struct EfficiencyReport {
  double threshold_fraction = 0.8;
  double min_return = 0.0;
  double best_return = 0.0;
  double threshold_value = 0.0;
  std::vector<EfficiencyRow> rows;
};

/// The threshold is min + fraction * (best - min), with min and best taken over
/// the smoothed curves of all compared runs.
inline EfficiencyReport efficiency(const std::vector<Curve>& curves, double fraction, int window = 5) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("threshold must lie in (0, 1]");
  if (curves.empty()) throw ConfigError("no curves to compare");
  std::vector<std::vector<double>> smoothed;
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (const Curve& c : curves) {
    if (c.values.empty()) throw FormatError("curve '" + c.label + "' has no points");
    smoothed.push_back(smooth_trailing(c.values, window));
    for (double v : smoothed.back()) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  EfficiencyReport r;
  r.threshold_fraction = fraction;
  r.min_return = lo;
  r.best_return = hi;
  r.threshold_value = lo + fraction * (hi - lo);
  for (std::size_t k = 0; k < curves.size(); ++k) {
    EfficiencyRow row;
    row.label = curves[k].label;
    row.budget = curves[k].steps.back();
    for (std::size_t i = 0; i < smoothed[k].size(); ++i) {
      if (smoothed[k][i] >= r.threshold_value) {
        row.step = curves[k].steps[i];
        row.index = static_cast<long>(i);
        row.percent_of_budget = row.budget > 0 ? 100.0 * static_cast<double>(*row.step) / row.budget : 0.0;
        break;
      }
    }
    r.rows.push_back(row);
  }
  return r;
}

}  // namespace qstac
