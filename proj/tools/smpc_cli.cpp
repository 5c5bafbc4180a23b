// Command-line front end: experiment orchestration and result emission.
//
// Subcommands:
//   simulate     closed-loop Monte Carlo; writes traces, summary, and plots
//   calibrate    exact-penalty weight search over a rho grid
//   verify       invariant suites (system, moments, duality, drift, solver)
//   export-socp  write one assembled conic program in the text interchange format
//
// The Monte Carlo worker count comes from SMPC_THREADS (default: hardware).

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "smpc/config.hpp"
#include "smpc/controller.hpp"
#include "smpc/emit.hpp"
#include "smpc/system.hpp"

namespace fs = std::filesystem;
using namespace smpc;

namespace {

int env_thread_count() {
  const char* s = std::getenv("SMPC_THREADS");
  if (!s || !*s) return 0;
  try {
    return std::max(0, std::stoi(s));
  } catch (...) {
    return 0;
  }
}

std::vector<double> parse_number_list(const std::string& text, const char* what) {
  std::vector<double> out;
  std::string item;
  std::istringstream ss(text);
  while (std::getline(ss, item, ',')) {
    std::istringstream is(item);
    double v;
    if (!(is >> v)) throw std::runtime_error(std::string("cannot parse ") + what + ": '" + item + "'");
    std::string rest;
    if (is >> rest) throw std::runtime_error(std::string("trailing text in ") + what + ": '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw std::runtime_error(std::string("empty ") + what);
  return out;
}

struct CommonArgs {
  std::string config_path;
  std::string controller = "smpc";
  ControllerMode mode() const {
    return controller == "nominal" ? ControllerMode::nominal : ControllerMode::smpc;
  }
};

// ----------------------------------------------------------------- simulate
int cmd_simulate(const CommonArgs& common, int runs_override, long long seed_override,
                 const std::string& out_override, const std::string& snapshot_override) {
  RunConfig rc = load_run_config(common.config_path);
  if (runs_override > 0) rc.runs = runs_override;
  if (seed_override >= 0) rc.base_seed = static_cast<std::uint64_t>(seed_override);
  if (!out_override.empty()) rc.out_dir = out_override;
  if (!snapshot_override.empty())
    rc.snapshot_times_hr = parse_number_list(snapshot_override, "--snapshot-times");

  const CaseData cd = load_case_data(rc);
  const SetpointSchedule schedule = build_schedule(cd, rc);
  const ControllerMode mode = common.mode();

  const EnsembleResult res =
      monte_carlo(cd, rc, schedule, mode, rc.runs, rc.base_seed, env_thread_count(),
                  rc.snapshot_times_hr.empty() ? nullptr : &rc.snapshot_times_hr);

  fs::create_directories(rc.out_dir);
  std::vector<std::string> trace_paths;
  for (const ClosedLoopTrace& tr : res.traces) {
    char name[64];
    std::snprintf(name, sizeof(name), "trace_run%04d.csv", tr.run_index);
    const std::string path = (fs::path(rc.out_dir) / name).string();
    write_trace_csv(path, tr, cd, rc.sampling_minutes);
    trace_paths.push_back(path);
  }
  const nlohmann::json summary = summary_to_json(res.summary, rc, cd, mode);
  write_summary_json((fs::path(rc.out_dir) / "summary.json").string(), summary);
  write_timings((fs::path(rc.out_dir) / "timings.txt").string(), res);

  // ---- plots, generated from the emitted CSVs
  std::vector<TraceTable> tables;
  tables.reserve(trace_paths.size());
  for (const std::string& p : trace_paths) tables.push_back(read_trace_csv(p));
  const TraceTable& t0 = tables.front();
  const int tcol = t0.column("time_hr");
  const Eigen::Index T1 = t0.values.rows();

  auto ensemble_mean_col = [&](int col) {
    std::vector<double> mean(static_cast<size_t>(T1), 0.0);
    for (const TraceTable& tab : tables)
      for (Eigen::Index i = 0; i < T1; ++i) mean[static_cast<size_t>(i)] += tab.values(i, col);
    for (double& v : mean) v /= static_cast<double>(tables.size());
    return mean;
  };
  std::vector<double> hours(static_cast<size_t>(T1));
  for (Eigen::Index i = 0; i < T1; ++i) hours[static_cast<size_t>(i)] = t0.values(i, tcol);

  const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2"};
  std::vector<SeriesSpec> series;
  if (rc.setpoint.enabled) {
    for (size_t i = 0; i < rc.setpoint.tracked.size(); ++i) {
      SeriesSpec sp;
      const Eigen::Index state = rc.setpoint.tracked[i];
      sp.label = "state " + std::to_string(state + 1) + " (ensemble mean, mM)";
      sp.color = palette[i % 6];
      sp.t = hours;
      sp.y = ensemble_mean_col(t0.column("x" + std::to_string(state + 1)));
      sp.target = rc.setpoint.targets[static_cast<Eigen::Index>(i)];
      sp.target_from_hr = rc.setpoint.step_time_hr;
      series.push_back(std::move(sp));
    }
  } else {
    const Eigen::Index nshow = std::min<Eigen::Index>(3, cd.sys.nx());
    for (Eigen::Index i = 0; i < nshow; ++i) {
      SeriesSpec sp;
      sp.label = "state " + std::to_string(i + 1) + " (ensemble mean)";
      sp.color = palette[i % 6];
      sp.t = hours;
      sp.y = ensemble_mean_col(t0.column("x" + std::to_string(i + 1)));
      series.push_back(std::move(sp));
    }
  }
  plot_time_series((fs::path(rc.out_dir) / "products.svg").string(), series, "time [hr]",
                   std::string("Tracked outputs, ") +
                       (mode == ControllerMode::nominal ? "nominal" : "SMPC") + " controller, " +
                       std::to_string(rc.runs) + " runs");

  const BoxBounds xbox = extract_box(cd.X_abs);
  std::vector<Eigen::Index> constrained;
  if (xbox.valid)
    for (Eigen::Index j = 0; j < cd.sys.nx(); ++j)
      if (std::isfinite(xbox.lo[j]) || std::isfinite(xbox.hi[j])) constrained.push_back(j);
  if (!constrained.empty() && !res.summary.snapshot_steps.empty()) {
    std::vector<HistSpec> hists;
    for (size_t si = 0; si < res.summary.snapshot_steps.size(); ++si) {
      const int step = res.summary.snapshot_steps[si];
      for (Eigen::Index j : constrained) {
        HistSpec hs;
        hs.label = "state " + std::to_string(j + 1) + " at t = " +
                   fmt_tick(step * rc.sampling_minutes / 60.0) + " hr";
        const int col = t0.column("x" + std::to_string(j + 1));
        for (const TraceTable& tab : tables) hs.samples.push_back(tab.values(step, col));
        hs.bound_lo = xbox.lo[j];
        hs.bound_hi = xbox.hi[j];
        hists.push_back(std::move(hs));
      }
    }
    plot_histograms((fs::path(rc.out_dir) / "constrained.svg").string(), hists,
                    "Constrained species across the ensemble");
  }

  const EnsembleSummary& s = res.summary;
  std::cout << "simulate: controller=" << (mode == ControllerMode::nominal ? "nominal" : "smpc")
            << " runs=" << s.runs << " steps=" << s.steps << " seed=" << rc.base_seed << "\n";
  std::cout << "  runs with state-constraint violation: " << s.runs_with_violation << " ("
            << 100.0 * s.violation_fraction << "%)\n";
  std::cout << "  degraded steps: " << s.degraded_steps << ", input clips: " << s.clip_steps
            << "\n";
  if (s.drift_evaluated)
    std::cout << "  drift: max mean V = " << s.drift.max_mean_V
              << ", ceiling at argmax = " << s.drift.ceiling_at_argmax
              << (s.drift.below_ceiling ? " (below)" : " (ABOVE)") << "\n";
  std::cout << "  artifacts in " << rc.out_dir << "\n";
  return 0;
}

// ---------------------------------------------------------------- calibrate
int cmd_calibrate(const CommonArgs& common, const std::string& grid_text, int probes,
                  double probe_scale, long long seed_override, const std::string& write_config) {
  RunConfig rc = load_run_config(common.config_path);
  const CaseData cd = load_case_data(rc);
  const SetpointSchedule schedule = build_schedule(cd, rc);
  const std::vector<double> grid = parse_number_list(grid_text, "--grid");
  const std::uint64_t seed =
      seed_override >= 0 ? static_cast<std::uint64_t>(seed_override) : rc.base_seed;

  // Probe states: the configured initial state plus random perturbations at
  // a scale tied to the state-constraint margins.
  const Eigen::VectorXd x0 =
      rc.initial_state.size() ? rc.initial_state : Eigen::VectorXd::Zero(cd.sys.nx());
  double margin_scale = 0.0;
  for (Eigen::Index r = 0; r < cd.X_abs.rows(); ++r) {
    const double margin = cd.X_abs.k[r] - cd.X_abs.H.row(r) * cd.x_lin;
    margin_scale += margin / cd.X_abs.H.row(r).cwiseAbs().sum();
  }
  margin_scale = std::max(1e-3, margin_scale / cd.X_abs.rows());
  const double scale = probe_scale > 0 ? probe_scale : 0.5 * margin_scale;

  CounterRng rng(seed, 0xca11b7a7e);
  std::vector<Eigen::VectorXd> probe_states;
  probe_states.push_back(x0);
  for (int k = 1; k < probes; ++k) {
    Eigen::VectorXd x = x0;
    for (Eigen::Index j = 0; j < x.size(); ++j) x[j] += scale * rng.normal();
    probe_states.push_back(x);
  }

  const CalibrationResult cal = calibrate_rho(cd, rc, schedule, probe_states, grid);
  std::cout << "calibrate: " << cal.feasible_probes << "/" << cal.total_probes
            << " probes hard-feasible, probe scale " << scale << "\n";
  std::cout << "  rho          max slack     policy dev    qualifies\n";
  for (const CalibrationRow& row : cal.table) {
    char line[128];
    std::snprintf(line, sizeof(line), "  %-12g %-13.3e %-13.3e %s\n", row.rho, row.max_slack,
                  row.max_policy_dev, row.qualifies ? "yes" : "no");
    std::cout << line;
  }
  if (cal.found)
    std::cout << "  selected rho* = " << cal.rho_star << "\n";
  else
    std::cout << "  no qualifying rho; largest tested = " << cal.rho_star << " (" << cal.note
              << ")\n";

  if (!write_config.empty()) {
    std::ifstream in(common.config_path);
    std::ostringstream updated;
    std::string line;
    bool replaced = false;
    while (std::getline(in, line)) {
      const auto eq = line.find('=');
      std::string key = line.substr(0, eq == std::string::npos ? 0 : eq);
      key.erase(0, key.find_first_not_of(" \t"));
      key.erase(key.find_last_not_of(" \t") + 1);
      if (eq != std::string::npos && key == "controller.penalty_rho") {
        updated << "controller.penalty_rho = " << cal.rho_star << "\n";
        replaced = true;
      } else {
        updated << line << "\n";
      }
    }
    if (!replaced) updated << "controller.penalty_rho = " << cal.rho_star << "\n";
    std::ofstream out(write_config);
    if (!out) throw std::runtime_error("cannot write updated config " + write_config);
    out << updated.str();
    std::cout << "  wrote updated config to " << write_config << "\n";
  }
  return cal.found ? 0 : 1;
}

// ------------------------------------------------------------------- verify
struct SuiteReport {
  bool ok = true;
  std::ostringstream detail;
};

int cmd_verify(const CommonArgs& common, long long seed_override) {
  RunConfig rc = load_run_config(common.config_path);
  const CaseData cd = load_case_data(rc);
  const std::uint64_t seed =
      seed_override >= 0 ? static_cast<std::uint64_t>(seed_override) : rc.base_seed;
  bool all_ok = true;
  auto emit = [&](const std::string& name, const SuiteReport& r) {
    std::cout << "suite " << name << " " << (r.ok ? "pass" : "fail") << "\n";
    if (!r.detail.str().empty()) std::cout << r.detail.str();
    all_ok = all_ok && r.ok;
  };

  // ---- plant assumptions
  {
    SuiteReport r;
    const Polytope U_dev = shift_polytope(cd.U_abs, cd.u_lin);
    const Polytope X_dev = shift_polytope(cd.X_abs, cd.x_lin);
    const ValidationReport vr = validate_system(cd.sys, U_dev, X_dev);
    for (const ValidationItem& it : vr.items) {
      if (!it.pass) r.ok = false;
      r.detail << "  - " << it.name << (it.pass ? " ok" : " FAIL") << " (" << it.witness << ")\n";
    }
    emit("system", r);
  }

  // ---- setpoint schedule consistency
  {
    SuiteReport r;
    try {
      const SetpointSchedule schedule = build_schedule(cd, rc);
      r.detail << "  - segments " << schedule.segments.size() << "\n";
      for (const SetpointSegment& seg : schedule.segments) {
        const Eigen::VectorXd resid = (Eigen::MatrixXd::Identity(cd.sys.nx(), cd.sys.nx()) -
                                       cd.sys.A) * seg.x_shift - cd.sys.B * seg.u_shift;
        r.detail << "  - segment at step " << seg.start_step << ": steady residual "
                 << resid.cwiseAbs().maxCoeff() << "\n";
      }
    } catch (const std::exception& e) {
      r.ok = false;
      r.detail << "  - " << e.what() << "\n";
    }
    emit("setpoint", r);
  }

  // ---- saturation moment cross-check: primary path vs quasi-random sampling
  {
    SuiteReport r;
    const SaturationMoments a = saturation_moments(rc.saturation, cd.sys, rc.horizon);
    const SaturationMoments b = saturation_moments(rc.saturation, cd.sys, rc.horizon,
                                                   MomentMethod::quasi_random, 1u << 17, seed);
    const double scale = std::max(1.0, a.omega2.cwiseAbs().maxCoeff());
    const double d1 = (a.omega1 - b.omega1).cwiseAbs().maxCoeff() / scale;
    const double d2 = (a.omega2 - b.omega2).cwiseAbs().maxCoeff() / scale;
    r.ok = d1 < 2e-3 && d2 < 2e-3;
    r.detail << "  - primary method " << a.meta.method << ", omega1 dev " << d1 << ", omega2 dev "
             << d2 << " (tolerance 2e-3)\n";
    emit("moments", r);
  }

  // ---- input-bound duality: LP dual equals the saturated-box maximum
  {
    SuiteReport r;
    CounterRng rng(seed, 0x1ea1);
    r.detail.str("");
    double worst = 0.0;
    const int instances = 40;
    for (int inst = 0; inst < instances; ++inst) {
      const int nx = 1 + static_cast<int>(rng.uniform() * 2);
      const int nu = 1 + static_cast<int>(rng.uniform() * 2);
      const int N = 1 + static_cast<int>(rng.uniform() * 3);
      const int a_rows = 2 * nx * N;
      const double phi = 0.05 + 0.3 * rng.uniform();
      Eigen::MatrixXd HuM(nu, nx * N);
      for (Eigen::Index i = 0; i < HuM.size(); ++i) HuM(i) = rng.normal();
      // Upper bound via the disturbance-box dual LP (Lemma 1 tightening).
      Eigen::MatrixXd Hw(a_rows, nx * N);
      Hw << Eigen::MatrixXd::Identity(nx * N, nx * N), -Eigen::MatrixXd::Identity(nx * N, nx * N);
      const Eigen::VectorXd kw = Eigen::VectorXd::Constant(a_rows, phi);
      for (int l = 0; l < nu; ++l) {
        // min kw'z  s.t. Hw'z = HuM_l', z >= 0   (solved as a max of -kw'z)
        Eigen::MatrixXd Hlp(2 * nx * N + a_rows, a_rows);
        Eigen::VectorXd klp(2 * nx * N + a_rows);
        Hlp.topRows(nx * N) = Hw.transpose();
        klp.head(nx * N) = HuM.row(l).transpose();
        Hlp.middleRows(nx * N, nx * N) = -Hw.transpose();
        klp.segment(nx * N, nx * N) = -HuM.row(l).transpose();
        Hlp.bottomRows(a_rows) = -Eigen::MatrixXd::Identity(a_rows, a_rows);
        klp.tail(a_rows).setZero();
        const auto lp = smpc::detail::micro_lp_max(-kw, Hlp, klp);
        const double direct = phi * HuM.row(l).cwiseAbs().sum();
        if (!lp.feasible || !lp.bounded) {
          r.ok = false;
          r.detail << "  - instance " << inst << " row " << l << ": dual LP failed\n";
          continue;
        }
        worst = std::max(worst, std::abs(-lp.value - direct));
      }
    }
    if (worst > 1e-8) r.ok = false;
    r.detail << "  - " << instances << " random instances, worst dual-vs-box gap " << worst
             << " (tolerance 1e-8)\n";
    emit("duality", r);
  }

  // ---- drift constants from the stability analysis
  {
    SuiteReport r;
    try {
      const DriftConstants d = compute_drift_constants(cd.sys, shift_polytope(cd.U_abs, cd.u_lin));
      r.ok = d.theta_found && d.lambda > 0.0 && d.lambda < 1.0 && d.radius > 0.0 && d.b > 0.0;
      r.detail << "  - lambda_max(P) " << d.lmax_P << ", theta " << d.theta << ", radius "
               << d.radius << ", lambda " << d.lambda << ", b " << d.b << "\n";
    } catch (const std::exception& e) {
      r.ok = false;
      r.detail << "  - " << e.what() << "\n";
    }
    emit("drift", r);
  }

  // ---- one representative solve
  {
    SuiteReport r;
    try {
      const SetpointSchedule schedule = build_schedule(cd, rc);
      SmpcController ctrl(cd, rc, schedule, common.mode());
      const Eigen::VectorXd x0 =
          rc.initial_state.size() ? rc.initial_state : Eigen::VectorXd::Zero(cd.sys.nx());
      SmpcController::StepResult step = ctrl.control_step(x0, 0);
      r.ok = step.status == SolveStatus::optimal && !step.degraded;
      r.detail << "  - status "
               << (step.status == SolveStatus::optimal        ? "optimal"
                   : step.status == SolveStatus::max_iterations ? "max-iterations"
                                                                : "numerical-failure")
               << ", iterations " << step.iterations << ", objective " << step.objective << "\n";
    } catch (const std::exception& e) {
      r.ok = false;
      r.detail << "  - " << e.what() << "\n";
    }
    emit("solve", r);
  }

  std::cout << (all_ok ? "verify: all suites passed" : "verify: FAILURES present") << "\n";
  return all_ok ? 0 : 1;
}

// -------------------------------------------------------------- export-socp
int cmd_export_socp(const CommonArgs& common, const std::string& out_path, int segment,
                    const std::string& state_text) {
  RunConfig rc = load_run_config(common.config_path);
  const CaseData cd = load_case_data(rc);
  const SetpointSchedule schedule = build_schedule(cd, rc);
  if (segment < 0 || segment >= static_cast<int>(schedule.segments.size()))
    throw std::runtime_error("no schedule segment " + std::to_string(segment));

  Eigen::VectorXd x_dev =
      rc.initial_state.size() ? rc.initial_state : Eigen::VectorXd::Zero(cd.sys.nx());
  if (!state_text.empty()) {
    const std::vector<double> vals = parse_number_list(state_text, "--state");
    if (static_cast<Eigen::Index>(vals.size()) != cd.sys.nx())
      throw std::runtime_error("--state needs " + std::to_string(cd.sys.nx()) + " entries");
    x_dev = Eigen::Map<const Eigen::VectorXd>(vals.data(), cd.sys.nx());
  }

  SmpcController ctrl(cd, rc, schedule, common.mode());
  const SetpointSegment& seg = schedule.segments[static_cast<size_t>(segment)];
  // The controller owns fully assembled programs; point the segment program
  // at the requested state and export it.
  SmpcSocp& socp = ctrl.program(segment);
  socp.set_state(x_dev - seg.x_shift);
  write_conic_file(out_path, socp.program());
  std::cout << "export-socp: wrote " << out_path << " (vars " << socp.program().num_vars
            << ", eq rows " << socp.program().A.rows() << ", cone rows " << socp.program().G.rows()
            << ")\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stochastic MPC toolkit: saturated-feedback SOCP synthesis and closed-loop "
               "Monte Carlo experiments"};
  app.require_subcommand(1);

  CommonArgs common;
  int runs_override = 0;
  long long seed_override = -1;
  std::string out_override, snapshot_override, grid_text = "0.1,1,10,100,1000,1e4,1e5";
  int probes = 8;
  double probe_scale = 0.0;
  std::string write_config, export_out = "program.socp", state_text;
  int segment = 0;

  auto add_common = [&](CLI::App* sc, bool with_controller = true) {
    sc->add_option("--config", common.config_path, "run configuration file")->required();
    if (with_controller)
      sc->add_option("--controller", common.controller, "controller variant")
          ->check(CLI::IsMember({"smpc", "nominal"}));
  };

  CLI::App* sim = app.add_subcommand("simulate", "closed-loop Monte Carlo experiment");
  add_common(sim);
  sim->add_option("--runs", runs_override, "override experiment.runs");
  sim->add_option("--seed", seed_override, "override experiment.base_seed");
  sim->add_option("--out", out_override, "override output.dir");
  sim->add_option("--snapshot-times", snapshot_override,
                  "comma-separated snapshot times [hr] for distribution histograms");

  CLI::App* cal = app.add_subcommand("calibrate", "exact-penalty weight calibration");
  add_common(cal, false);
  cal->add_option("--grid", grid_text, "comma-separated rho grid");
  cal->add_option("--probes", probes, "number of probe states")->check(CLI::PositiveNumber);
  cal->add_option("--probe-scale", probe_scale, "probe perturbation scale (state units)");
  cal->add_option("--seed", seed_override, "probe RNG seed (default experiment.base_seed)");
  cal->add_option("--write-config", write_config, "write a config copy with rho = rho*");

  CLI::App* ver = app.add_subcommand("verify", "run invariant suites");
  add_common(ver);
  ver->add_option("--seed", seed_override, "suite RNG seed (default experiment.base_seed)");

  CLI::App* exp = app.add_subcommand("export-socp", "write the assembled conic program");
  add_common(exp);
  exp->add_option("--out", export_out, "output file");
  exp->add_option("--segment", segment, "schedule segment index");
  exp->add_option("--state", state_text,
                  "comma-separated observed state (deviation coordinates); default "
                  "experiment.initial_state");

  CLI11_PARSE(app, argc, argv);

  try {
    if (sim->parsed())
      return cmd_simulate(common, runs_override, seed_override, out_override, snapshot_override);
    if (cal->parsed())
      return cmd_calibrate(common, grid_text, probes, probe_scale, seed_override, write_config);
    if (ver->parsed()) return cmd_verify(common, seed_override);
    if (exp->parsed()) return cmd_export_socp(common, export_out, segment, state_text);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
