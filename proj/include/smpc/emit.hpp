#pragma once

// Result emission: per-run trace CSVs, the ensemble summary JSON, a
// wall-clock sidecar, and static SVG plots drawn from the CSVs.  Trace and
// summary files are deterministic for a fixed seed: they never contain wall
// times (those go to the sidecar) and all floating-point values are printed
// with round-trip precision.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "smpc/config.hpp"
#include "smpc/controller.hpp"
#include "smpc/version.hpp"

namespace smpc {

inline constexpr const char* kTraceSchemaName = "smpc-trace v1";
inline constexpr const char* kSummarySchemaName = "smpc-summary/1";

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline const char* status_name(SolveStatus s) {
  switch (s) {
    case SolveStatus::optimal: return "optimal";
    case SolveStatus::max_iterations: return "max-iterations";
    default: return "numerical-failure";
  }
}

}  // namespace detail

// -------------------------------------------------------------- trace CSV
// Columns: step index, wall-clock hour, absolute states, absolute inputs,
// slack 1-norm, objective, solver status, iteration count, and the
// degraded/clipped/violation flags.  States are stored in absolute units;
// subtract the case file's x_lin to recover the simulated deviations.
inline void write_trace_csv(const std::string& path, const ClosedLoopTrace& tr,
                            const CaseData& cd, double sampling_minutes) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open trace file " + path);
  const Eigen::Index nx = tr.x_dev.cols(), nu = tr.u_abs.cols();
  out << "# " << kTraceSchemaName << "\n";
  out << "# run " << tr.run_index << " base_seed " << tr.base_seed << "\n";
  out << "t,time_hr";
  for (Eigen::Index j = 0; j < nx; ++j) out << ",x" << (j + 1);
  for (Eigen::Index j = 0; j < nu; ++j) out << ",u" << (j + 1);
  out << ",slack_sum,objective,status,iterations,degraded,clipped,violation\n";
  const Eigen::Index T = tr.u_abs.rows();
  for (Eigen::Index t = 0; t <= T; ++t) {
    out << t << "," << detail::fmt_double(static_cast<double>(t) * sampling_minutes / 60.0);
    for (Eigen::Index j = 0; j < nx; ++j)
      out << "," << detail::fmt_double(tr.x_dev(t, j) + cd.x_lin[j]);
    if (t < T) {
      for (Eigen::Index j = 0; j < nu; ++j) out << "," << detail::fmt_double(tr.u_abs(t, j));
      out << "," << detail::fmt_double(tr.slack_sum[t]) << ","
          << detail::fmt_double(tr.objective[t]) << ","
          << detail::status_name(tr.status[static_cast<size_t>(t)]) << "," << tr.iterations[t]
          << "," << tr.degraded[t] << "," << tr.clip_active[t];
    } else {
      // Terminal row: state only; no input was computed at the horizon end.
      for (Eigen::Index j = 0; j < nu; ++j) out << ",";
      out << ",,,,,,";
    }
    out << "," << tr.violation_any[t] << "\n";
  }
}

// In-memory view of a trace CSV, used by the plot generator (plots are drawn
// from the emitted files, not from live simulation state).
struct TraceTable {
  std::vector<std::string> columns;
  Eigen::MatrixXd values;  // numeric cells; non-numeric cells are NaN
  int column(const std::string& name) const {
    for (size_t j = 0; j < columns.size(); ++j)
      if (columns[j] == name) return static_cast<int>(j);
    throw std::runtime_error("trace has no column '" + name + "'");
  }
};

inline TraceTable read_trace_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open trace file " + path);
  std::string line;
  if (!std::getline(in, line) || line.rfind("# ", 0) != 0 ||
      line.substr(2) != kTraceSchemaName)
    throw std::runtime_error(path + ": missing or unsupported trace schema line");
  TraceTable tab;
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.push_back("");
    if (tab.columns.empty()) {
      tab.columns = cells;
      continue;
    }
    if (cells.size() != tab.columns.size())
      throw std::runtime_error(path + ": ragged row with " + std::to_string(cells.size()) +
                               " cells");
    std::vector<double> row(cells.size());
    for (size_t j = 0; j < cells.size(); ++j) {
      try {
        size_t used = 0;
        row[j] = std::stod(cells[j], &used);
        if (used != cells[j].size()) row[j] = std::numeric_limits<double>::quiet_NaN();
      } catch (...) {
        row[j] = std::numeric_limits<double>::quiet_NaN();
      }
    }
    rows.push_back(std::move(row));
  }
  if (tab.columns.empty()) throw std::runtime_error(path + ": no header row");
  tab.values.resize(static_cast<Eigen::Index>(rows.size()),
                    static_cast<Eigen::Index>(tab.columns.size()));
  for (size_t i = 0; i < rows.size(); ++i)
    for (size_t j = 0; j < rows[i].size(); ++j)
      tab.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return tab;
}

// ----------------------------------------------------------- summary JSON
inline nlohmann::json summary_to_json(const EnsembleSummary& s, const RunConfig& rc,
                                      const CaseData& cd, ControllerMode mode) {
  nlohmann::json j;
  j["schema"] = kSummarySchemaName;
  j["case"] = {{"family", rc.family == DensityFamily::gaussian    ? "gaussian"
                          : rc.family == DensityFamily::uniform   ? "uniform"
                                                                  : "laplace"},
               {"controller", mode == ControllerMode::nominal ? "nominal" : "smpc"},
               {"runs", s.runs},
               {"steps", s.steps},
               {"base_seed", rc.base_seed},
               {"sampling_minutes", rc.sampling_minutes},
               {"horizon", rc.horizon},
               {"rho", rc.rho}};

  nlohmann::json viol;
  viol["runs_with_violation"] = s.runs_with_violation;
  viol["fraction_of_runs"] = s.violation_fraction;
  viol["per_constraint_row_steps"] = std::vector<int>(
      s.row_violation_steps.data(), s.row_violation_steps.data() + s.row_violation_steps.size());
  j["violations"] = viol;

  j["inputs"] = {{"degraded_steps", s.degraded_steps}, {"clip_steps", s.clip_steps}};
  j["solver"] = {{"iterations_total", s.solver_iterations}};

  auto matrix_json = [&](const Eigen::MatrixXd& m) {
    nlohmann::json arr = nlohmann::json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      nlohmann::json row = nlohmann::json::array();
      for (Eigen::Index jx = 0; jx < m.cols(); ++jx) row.push_back(m(i, jx));
      arr.push_back(std::move(row));
    }
    return arr;
  };
  j["states"] = {{"mean", matrix_json(s.mean_x_abs)}, {"variance", matrix_json(s.var_x_abs)}};
  j["mean_inputs"] = matrix_json(s.mean_u_abs);

  nlohmann::json snaps = nlohmann::json::array();
  for (size_t i = 0; i < s.snapshot_steps.size(); ++i) {
    nlohmann::json snap;
    snap["step"] = s.snapshot_steps[i];
    snap["time_hr"] = s.snapshot_steps[i] * s.sampling_minutes / 60.0;
    snap["states"] = matrix_json(s.snapshots[i]);
    snaps.push_back(std::move(snap));
  }
  j["snapshots"] = snaps;

  if (s.drift_evaluated) {
    const DriftReport& d = s.drift;
    j["drift"] = {{"constants_valid", d.constants_valid},
                  {"theta", d.theta},
                  {"radius", d.radius},
                  {"lambda", d.lambda},
                  {"b", d.b},
                  {"lmax_P", d.lmax_P},
                  {"v0", d.v0},
                  {"max_mean_V", d.max_mean_V},
                  {"argmax_t", d.argmax_t},
                  {"ceiling_at_argmax", d.ceiling_at_argmax},
                  {"below_ceiling", d.below_ceiling},
                  {"drift_mean", d.drift_mean},
                  {"drift_se", d.drift_se},
                  {"drift_samples", d.drift_samples},
                  {"drift_nonpositive", d.drift_nonpositive}};
  }

  j["tracking"] = nlohmann::json::object();
  if (rc.setpoint.enabled) {
    j["tracking"]["tracked_states"] =
        std::vector<int>(rc.setpoint.tracked.begin(), rc.setpoint.tracked.end());
    j["tracking"]["targets"] =
        std::vector<double>(rc.setpoint.targets.data(),
                            rc.setpoint.targets.data() + rc.setpoint.targets.size());
    j["tracking"]["step_time_hr"] = rc.setpoint.step_time_hr;
  }
  (void)cd;
  return j;
}

inline void write_summary_json(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open summary file " + path);
  out << j.dump(2) << "\n";
}

// Wall-clock sidecar; the only artifact allowed to differ between reruns.
inline void write_timings(const std::string& path, const EnsembleResult& res) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open timings file " + path);
  out << "# wall-clock timings; not deterministic, excluded from reproducibility checks\n";
  out << "total_solve_ms " << res.summary.solve_ms_total << "\n";
  double worst = 0.0;
  long solves = 0;
  for (const auto& tr : res.traces) {
    solves += tr.solve_ms.size();
    if (tr.solve_ms.size()) worst = std::max(worst, tr.solve_ms.maxCoeff());
  }
  out << "solves " << solves << "\n";
  if (solves > 0) out << "mean_solve_ms " << res.summary.solve_ms_total / solves << "\n";
  out << "max_solve_ms " << worst << "\n";
}

// ------------------------------------------------- minimal schema validation
// Structural check against the shipped JSON schema (a draft-07 subset:
// type / required / properties / items).  Returns problems, empty on pass.
inline void schema_check(const nlohmann::json& schema, const nlohmann::json& value,
                         const std::string& where, std::vector<std::string>& problems) {
  if (schema.contains("type")) {
    const std::string t = schema["type"];
    const bool ok = (t == "object" && value.is_object()) || (t == "array" && value.is_array()) ||
                    (t == "string" && value.is_string()) ||
                    (t == "number" && value.is_number()) ||
                    (t == "integer" && value.is_number_integer()) ||
                    (t == "boolean" && value.is_boolean());
    if (!ok) {
      problems.push_back(where + ": expected " + t);
      return;
    }
  }
  if (schema.contains("required"))
    for (const auto& req : schema["required"])
      if (!value.contains(req.get<std::string>()))
        problems.push_back(where + ": missing required key '" + req.get<std::string>() + "'");
  if (schema.contains("properties") && value.is_object())
    for (auto it = schema["properties"].begin(); it != schema["properties"].end(); ++it)
      if (value.contains(it.key()))
        schema_check(it.value(), value[it.key()], where + "/" + it.key(), problems);
  if (schema.contains("items") && value.is_array())
    for (size_t i = 0; i < value.size(); ++i)
      schema_check(schema["items"], value[i], where + "[" + std::to_string(i) + "]", problems);
}

inline std::vector<std::string> validate_against_schema(const nlohmann::json& schema,
                                                        const nlohmann::json& value) {
  std::vector<std::string> problems;
  schema_check(schema, value, "$", problems);
  return problems;
}

// ------------------------------------------------------------------ plots
// Hand-rolled static SVG output; enough for time series and histograms.
class SvgCanvas {
 public:
  SvgCanvas(double width, double height) : w_(width), h_(height) {
    body_ << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w_ << "\" height=\"" << h_
          << "\" viewBox=\"0 0 " << w_ << " " << h_ << "\">\n"
          << "<rect width=\"" << w_ << "\" height=\"" << h_ << "\" fill=\"white\"/>\n";
  }
  void line(double x1, double y1, double x2, double y2, const std::string& stroke,
            double width = 1.0, const std::string& dash = "") {
    body_ << "<line x1=\"" << x1 << "\" y1=\"" << y1 << "\" x2=\"" << x2 << "\" y2=\"" << y2
          << "\" stroke=\"" << stroke << "\" stroke-width=\"" << width << "\"";
    if (!dash.empty()) body_ << " stroke-dasharray=\"" << dash << "\"";
    body_ << "/>\n";
  }
  void polyline(const std::vector<std::pair<double, double>>& pts, const std::string& stroke,
                double width = 1.5) {
    body_ << "<polyline fill=\"none\" stroke=\"" << stroke << "\" stroke-width=\"" << width
          << "\" points=\"";
    for (const auto& p : pts) body_ << p.first << "," << p.second << " ";
    body_ << "\"/>\n";
  }
  void rect(double x, double y, double w, double h, const std::string& fill,
            double opacity = 1.0) {
    body_ << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << w << "\" height=\"" << h
          << "\" fill=\"" << fill << "\" fill-opacity=\"" << opacity << "\"/>\n";
  }
  void text(double x, double y, const std::string& s, double size = 12.0,
            const std::string& anchor = "start", const std::string& fill = "black") {
    body_ << "<text x=\"" << x << "\" y=\"" << y << "\" font-size=\"" << size
          << "\" font-family=\"sans-serif\" text-anchor=\"" << anchor << "\" fill=\"" << fill
          << "\">" << s << "</text>\n";
  }
  void save(const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open plot file " + path);
    out << body_.str() << "</svg>\n";
  }

 private:
  double w_, h_;
  std::ostringstream body_;
};

struct AxisMap {
  double lo = 0.0, hi = 1.0;   // data range
  double a = 0.0, b = 1.0;     // pixel range
  double operator()(double v) const { return a + (v - lo) / (hi - lo) * (b - a); }
};

inline std::vector<double> nice_ticks(double lo, double hi, int target = 6) {
  const double span = hi - lo;
  if (!(span > 0)) return {lo};
  double step = std::pow(10.0, std::floor(std::log10(span / target)));
  for (double m : {1.0, 2.0, 5.0, 10.0, 20.0}) {
    if (span / (step * m) <= target) {
      step *= m;
      break;
    }
  }
  std::vector<double> ticks;
  for (double v = std::ceil(lo / step) * step; v <= hi + 1e-12 * span; v += step)
    ticks.push_back(v);
  return ticks;
}

inline std::string fmt_tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

struct SeriesSpec {
  std::string label;
  std::string color;
  std::vector<double> t;  // hours
  std::vector<double> y;  // per-run or mean values
  double target = std::numeric_limits<double>::quiet_NaN();  // setpoint line
  double target_from_hr = 0.0;
};

// Time-series panel per series, with optional dashed setpoint line starting
// at the setpoint step.
inline void plot_time_series(const std::string& path, const std::vector<SeriesSpec>& series,
                             const std::string& x_label, const std::string& title) {
  const double W = 760, panel_h = 170, left = 64, right = 20, top = 40, gap = 34;
  const double H = top + series.size() * (panel_h + gap);
  SvgCanvas svg(W, H);
  svg.text(W / 2, 22, title, 15, "middle");
  for (size_t k = 0; k < series.size(); ++k) {
    const SeriesSpec& sp = series[k];
    const double py0 = top + k * (panel_h + gap), py1 = py0 + panel_h;
    double ylo = *std::min_element(sp.y.begin(), sp.y.end());
    double yhi = *std::max_element(sp.y.begin(), sp.y.end());
    if (std::isfinite(sp.target)) {
      ylo = std::min(ylo, sp.target);
      yhi = std::max(yhi, sp.target);
    }
    const double pad = std::max(1e-9, (yhi - ylo) * 0.12);
    AxisMap xm{sp.t.front(), sp.t.back(), left, W - right};
    AxisMap ym{ylo - pad, yhi + pad, py1, py0};
    svg.rect(left, py0, W - right - left, panel_h, "#f8f8f8");
    for (double tv : nice_ticks(xm.lo, xm.hi)) {
      svg.line(xm(tv), py1, xm(tv), py1 + 4, "black");
      if (k + 1 == series.size()) svg.text(xm(tv), py1 + 18, fmt_tick(tv), 11, "middle");
    }
    for (double tv : nice_ticks(ym.lo, ym.hi, 4)) {
      svg.line(left - 4, ym(tv), left, ym(tv), "black");
      svg.text(left - 8, ym(tv) + 4, fmt_tick(tv), 11, "end");
      svg.line(left, ym(tv), W - right, ym(tv), "#dddddd", 0.6);
    }
    if (std::isfinite(sp.target)) {
      svg.line(xm(std::max(xm.lo, sp.target_from_hr)), ym(sp.target), W - right, ym(sp.target),
               "#444444", 1.2, "6,4");
      svg.text(W - right - 4, ym(sp.target) - 5, "setpoint " + fmt_tick(sp.target), 10, "end",
               "#444444");
    }
    std::vector<std::pair<double, double>> pts;
    pts.reserve(sp.t.size());
    for (size_t i = 0; i < sp.t.size(); ++i) pts.push_back({xm(sp.t[i]), ym(sp.y[i])});
    svg.polyline(pts, sp.color);
    svg.text(left + 6, py0 + 16, sp.label, 12);
  }
  svg.text(W / 2, H - 4, x_label, 12, "middle");
  svg.save(path);
}

struct HistSpec {
  std::string label;
  std::vector<double> samples;
  double bound_lo = std::numeric_limits<double>::quiet_NaN();
  double bound_hi = std::numeric_limits<double>::quiet_NaN();
};

// One histogram panel per (snapshot time, species): distribution of the
// ensemble with the constraint bounds marked.
inline void plot_histograms(const std::string& path, const std::vector<HistSpec>& specs,
                            const std::string& title) {
  const double W = 760, panel_h = 150, left = 64, right = 20, top = 40, gap = 40;
  const double H = top + specs.size() * (panel_h + gap);
  SvgCanvas svg(W, H);
  svg.text(W / 2, 22, title, 15, "middle");
  for (size_t k = 0; k < specs.size(); ++k) {
    const HistSpec& hs = specs[k];
    const double py0 = top + k * (panel_h + gap), py1 = py0 + panel_h;
    double lo = *std::min_element(hs.samples.begin(), hs.samples.end());
    double hi = *std::max_element(hs.samples.begin(), hs.samples.end());
    if (std::isfinite(hs.bound_lo)) lo = std::min(lo, hs.bound_lo);
    if (std::isfinite(hs.bound_hi)) hi = std::max(hi, hs.bound_hi);
    const double pad = std::max(1e-9, (hi - lo) * 0.08);
    lo -= pad;
    hi += pad;
    const int nbins = 24;
    std::vector<int> bins(nbins, 0);
    for (double v : hs.samples) {
      int b = static_cast<int>((v - lo) / (hi - lo) * nbins);
      bins[std::clamp(b, 0, nbins - 1)]++;
    }
    const int peak = *std::max_element(bins.begin(), bins.end());
    AxisMap xm{lo, hi, left, W - right};
    AxisMap ym{0.0, static_cast<double>(std::max(peak, 1)), py1, py0 + 14};
    svg.rect(left, py0, W - right - left, panel_h, "#f8f8f8");
    for (int b = 0; b < nbins; ++b) {
      const double x0 = xm(lo + (hi - lo) * b / nbins), x1 = xm(lo + (hi - lo) * (b + 1) / nbins);
      svg.rect(x0, ym(bins[b]), x1 - x0 - 0.6, py1 - ym(bins[b]), "#5588cc", 0.85);
    }
    for (double tv : nice_ticks(lo, hi)) {
      svg.line(xm(tv), py1, xm(tv), py1 + 4, "black");
      svg.text(xm(tv), py1 + 17, fmt_tick(tv), 11, "middle");
    }
    if (std::isfinite(hs.bound_lo))
      svg.line(xm(hs.bound_lo), py0 + 8, xm(hs.bound_lo), py1, "#cc2222", 1.5, "5,3");
    if (std::isfinite(hs.bound_hi))
      svg.line(xm(hs.bound_hi), py0 + 8, xm(hs.bound_hi), py1, "#cc2222", 1.5, "5,3");
    svg.text(left + 6, py0 + 12, hs.label, 12);
  }
  svg.save(path);
}

}  // namespace smpc
