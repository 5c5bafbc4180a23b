#pragma once

// Run configuration: a single structured text file of dotted keys
// ("section.subsection.key = value") with units spelled out in key names.
// Parsing is strict — duplicate or unknown keys, malformed numbers, and
// out-of-range settings are rejected with file:line messages — because the
// config is the one auditable record of an experiment.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "smpc/chance.hpp"
#include "smpc/matrix_io.hpp"
#include "smpc/saturation.hpp"
#include "smpc/solver.hpp"
#include "smpc/system.hpp"

namespace smpc {

// ------------------------------------------------------------------ key store
class ConfigMap {
 public:
  static ConfigMap read_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open config: " + path);
    ConfigMap m;
    m.origin_ = path;
    const size_t slash = path.find_last_of('/');
    m.dir_ = slash == std::string::npos ? std::string(".") : path.substr(0, slash);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const size_t hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const std::string trimmed = trim(line);
      if (trimmed.empty()) continue;
      const size_t eq = trimmed.find('=');
      if (eq == std::string::npos)
        throw std::runtime_error(m.where(lineno) + ": expected 'key = value'");
      const std::string key = trim(trimmed.substr(0, eq));
      const std::string value = trim(trimmed.substr(eq + 1));
      if (key.empty()) throw std::runtime_error(m.where(lineno) + ": empty key");
      for (char c : key)
        if (!(std::islower(static_cast<unsigned char>(c)) ||
              std::isdigit(static_cast<unsigned char>(c)) || c == '.' || c == '_' || c == '-'))
          throw std::runtime_error(m.where(lineno) + ": invalid character in key '" + key + "'");
      if (value.empty()) throw std::runtime_error(m.where(lineno) + ": empty value for '" + key + "'");
      if (!m.entries_.emplace(key, Entry{value, lineno, false}).second)
        throw std::runtime_error(m.where(lineno) + ": duplicate key '" + key + "'");
    }
    return m;
  }

  const std::string& origin() const { return origin_; }
  const std::string& dir() const { return dir_; }

  bool has(const std::string& key) const { return entries_.count(key) != 0; }

  std::string get_string(const std::string& key) {
    return fetch(key).value;
  }
  std::string get_string(const std::string& key, const std::string& fallback) {
    return has(key) ? get_string(key) : fallback;
  }

  double get_double(const std::string& key) {
    const Entry& e = fetch(key);
    return parse_double(e.value, key, e.line);
  }
  double get_double(const std::string& key, double fallback) {
    return has(key) ? get_double(key) : fallback;
  }

  long get_long(const std::string& key) {
    const Entry& e = fetch(key);
    try {
      size_t used = 0;
      const long v = std::stol(e.value, &used);
      if (used != e.value.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw std::runtime_error(where(e.line) + ": '" + key + "' must be an integer, got '" +
                               e.value + "'");
    }
  }
  long get_long(const std::string& key, long fallback) {
    return has(key) ? get_long(key) : fallback;
  }

  std::uint64_t get_u64(const std::string& key) {
    const Entry& e = fetch(key);
    try {
      size_t used = 0;
      const unsigned long long v = std::stoull(e.value, &used);
      if (used != e.value.size()) throw std::invalid_argument("trailing");
      return static_cast<std::uint64_t>(v);
    } catch (const std::exception&) {
      throw std::runtime_error(where(e.line) + ": '" + key + "' must be a nonnegative integer");
    }
  }
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) {
    return has(key) ? get_u64(key) : fallback;
  }

  std::vector<double> get_list(const std::string& key) {
    const Entry& e = fetch(key);
    std::istringstream is(e.value);
    std::vector<double> out;
    std::string tok;
    while (is >> tok) out.push_back(parse_double(tok, key, e.line));
    if (out.empty())
      throw std::runtime_error(where(e.line) + ": '" + key + "' must hold at least one number");
    return out;
  }
  Eigen::VectorXd get_vector(const std::string& key) {
    const std::vector<double> v = get_list(key);
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
  }

  int line_of(const std::string& key) const {
    auto it = entries_.find(key);
    return it == entries_.end() ? 0 : it->second.line;
  }

  [[noreturn]] void reject(const std::string& key, const std::string& msg) const {
    throw std::runtime_error(where(line_of(key)) + ": '" + key + "' " + msg);
  }

  // Strictness: every key must have been consumed by the loader.
  void require_all_consumed() const {
    for (const auto& [key, e] : entries_)
      if (!e.consumed)
        throw std::runtime_error(where(e.line) + ": unknown key '" + key + "'");
  }

 private:
  struct Entry {
    std::string value;
    int line = 0;
    bool consumed = false;
  };

  Entry& fetch(const std::string& key) {
    auto it = entries_.find(key);
    if (it == entries_.end())
      throw std::runtime_error(origin_ + ": missing required key '" + key + "'");
    it->second.consumed = true;
    return it->second;
  }

  double parse_double(const std::string& text, const std::string& key, int line) const {
    try {
      size_t used = 0;
      const double v = std::stod(text, &used);
      if (used != text.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw std::runtime_error(where(line) + ": '" + key + "' must be numeric, got '" + text + "'");
    }
  }

  std::string where(int line) const { return origin_ + ":" + std::to_string(line); }

  static std::string trim(const std::string& s) {
    const size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  }

  std::map<std::string, Entry> entries_;
  std::string origin_, dir_;
};

// ------------------------------------------------------------- run settings
enum class RiskMode { per_row, joint, explicit_rows };

struct RiskSettings {
  RiskMode mode = RiskMode::per_row;
  double alpha_per_row = 0.0;   // per-row mode
  double beta_joint = 0.0;      // joint and explicit modes
  Eigen::VectorXd alpha_rows;   // explicit mode
};

struct SetpointSettings {
  bool enabled = false;                 // "none" vs "products"
  std::vector<Eigen::Index> tracked;    // 0-based state indices
  Eigen::VectorXd targets;              // absolute levels after the step
  double step_time_hr = 0.0;
  double step_scale = 1.0;              // pre-step targets are targets/scale
};

struct RunConfig {
  std::string origin;       // config path (diagnostics)
  std::string source_path;  // resolved system matrix file
  DensityFamily family = DensityFamily::gaussian;

  int horizon = 0;
  double sampling_minutes = 0.0;
  double rho = 0.0;
  SaturationPolicy saturation;
  RiskSettings risk;
  double backoff_fraction = 0.0;

  SolverSettings solver;
  SetpointSettings setpoint;

  int steps = 0;
  int runs = 0;
  std::uint64_t base_seed = 0;
  Eigen::VectorXd initial_state;        // deviation coordinates; empty = origin
  std::vector<double> snapshot_times_hr;

  std::string out_dir;
};

// Plant data loaded from the labeled-block matrix file.
struct CaseData {
  LinearStochasticSystem sys;
  Polytope U_abs, X_abs;     // absolute-coordinate polytopes
  Eigen::VectorXd x_lin, u_lin;
  Eigen::MatrixXd Q, R;
};

inline const char* kConfigSchemaName = "smpc-config/1";

inline RunConfig load_run_config(const std::string& path) {
  ConfigMap m = ConfigMap::read_file(path);
  RunConfig rc;
  rc.origin = path;

  const std::string schema = m.get_string("schema");
  if (schema != kConfigSchemaName)
    m.reject("schema", "must be '" + std::string(kConfigSchemaName) + "'");

  // System source: a matrix-file path (relative to the config) or a bare
  // bundled-case name resolved to <name>.sysmat beside the config.
  std::string src = m.get_string("system.source");
  if (src.find('.') == std::string::npos) src += ".sysmat";
  rc.source_path = src.front() == '/' ? src : m.dir() + "/" + src;

  const std::string fam = m.get_string("system.disturbance", "gaussian");
  if (fam == "gaussian")
    rc.family = DensityFamily::gaussian;
  else if (fam == "uniform")
    rc.family = DensityFamily::uniform;
  else if (fam == "laplace")
    rc.family = DensityFamily::laplace;
  else
    m.reject("system.disturbance", "must be gaussian, uniform, or laplace");

  rc.horizon = static_cast<int>(m.get_long("controller.horizon"));
  if (rc.horizon < 1) m.reject("controller.horizon", "must be >= 1");
  rc.sampling_minutes = m.get_double("controller.sampling_period_min");
  if (!(rc.sampling_minutes > 0)) m.reject("controller.sampling_period_min", "must be positive");
  rc.rho = m.get_double("controller.penalty_rho");
  if (!(rc.rho >= 0)) m.reject("controller.penalty_rho", "must be nonnegative");

  const std::string sat = m.get_string("controller.saturation", "hard-clip");
  if (sat == "hard-clip")
    rc.saturation.kind = SaturationKind::hard_clip;
  else if (sat == "scaled-sigmoid")
    rc.saturation.kind = SaturationKind::scaled_sigmoid;
  else
    m.reject("controller.saturation", "must be hard-clip or scaled-sigmoid");
  rc.saturation.phi_max = m.get_double("controller.saturation_phi_max");
  if (!(rc.saturation.phi_max > 0)) m.reject("controller.saturation_phi_max", "must be positive");

  const std::string risk_mode = m.get_string("controller.risk.mode", "per-row");
  if (risk_mode == "per-row") {
    rc.risk.mode = RiskMode::per_row;
    rc.risk.alpha_per_row = m.get_double("controller.risk.alpha_per_row");
    if (!(rc.risk.alpha_per_row > 0 && rc.risk.alpha_per_row < 1))
      m.reject("controller.risk.alpha_per_row", "must lie in (0,1)");
  } else if (risk_mode == "joint") {
    rc.risk.mode = RiskMode::joint;
    rc.risk.beta_joint = m.get_double("controller.risk.beta_joint");
    if (!(rc.risk.beta_joint > 0 && rc.risk.beta_joint < 1))
      m.reject("controller.risk.beta_joint", "must lie in (0,1)");
  } else if (risk_mode == "explicit") {
    rc.risk.mode = RiskMode::explicit_rows;
    rc.risk.alpha_rows = m.get_vector("controller.risk.alpha_rows");
    rc.risk.beta_joint = m.get_double("controller.risk.beta_joint");
    if (!(rc.risk.beta_joint > 0 && rc.risk.beta_joint <= 1))
      m.reject("controller.risk.beta_joint", "must lie in (0,1]");
    // The Boole-sum admissibility check runs at spec construction, where the
    // horizon multiplies the row sum; surface it here for early rejection.
    double sum = 0.0;
    for (Eigen::Index i = 0; i < rc.risk.alpha_rows.size(); ++i) {
      if (!(rc.risk.alpha_rows[i] > 0 && rc.risk.alpha_rows[i] < 1))
        m.reject("controller.risk.alpha_rows", "entries must lie in (0,1)");
      sum += rc.risk.alpha_rows[i];
    }
    if (sum * rc.horizon > rc.risk.beta_joint + 1e-12)
      m.reject("controller.risk.alpha_rows",
               "allocated risk " + std::to_string(sum * rc.horizon) +
                   " exceeds the joint budget " + std::to_string(rc.risk.beta_joint));
  } else {
    m.reject("controller.risk.mode", "must be per-row, joint, or explicit");
  }

  rc.backoff_fraction = m.get_double("controller.backoff_fraction");
  if (!(rc.backoff_fraction > 0 && rc.backoff_fraction < 1))
    m.reject("controller.backoff_fraction", "must lie in (0,1)");

  rc.solver.tolerance = m.get_double("solver.tolerance", rc.solver.tolerance);
  if (!(rc.solver.tolerance > 0 && rc.solver.tolerance < 1))
    m.reject("solver.tolerance", "must lie in (0,1)");
  rc.solver.max_iterations = static_cast<int>(m.get_long("solver.max_iterations",
                                                         rc.solver.max_iterations));
  if (rc.solver.max_iterations < 1) m.reject("solver.max_iterations", "must be >= 1");
  if (m.has("solver.scaling")) {
    const std::string sc = m.get_string("solver.scaling");
    if (sc == "on")
      rc.solver.scaling = true;
    else if (sc == "off")
      rc.solver.scaling = false;
    else
      m.reject("solver.scaling", "must be on or off");
  }

  const std::string sp_mode = m.get_string("setpoint.mode", "none");
  if (sp_mode == "products") {
    rc.setpoint.enabled = true;
    const std::vector<double> idx = m.get_list("setpoint.tracked_states");
    for (double v : idx) {
      const long i = static_cast<long>(v);
      if (static_cast<double>(i) != v || i < 1)
        m.reject("setpoint.tracked_states", "must hold 1-based integer state indices");
      rc.setpoint.tracked.push_back(static_cast<Eigen::Index>(i - 1));
    }
    rc.setpoint.targets = m.get_vector("setpoint.targets_mm");
    if (rc.setpoint.targets.size() != static_cast<Eigen::Index>(rc.setpoint.tracked.size()))
      m.reject("setpoint.targets_mm", "length must match setpoint.tracked_states");
    rc.setpoint.step_time_hr = m.get_double("setpoint.step_time_hr");
    if (!(rc.setpoint.step_time_hr >= 0)) m.reject("setpoint.step_time_hr", "must be nonnegative");
    rc.setpoint.step_scale = m.get_double("setpoint.step_scale");
    if (!(rc.setpoint.step_scale > 0)) m.reject("setpoint.step_scale", "must be positive");
  } else if (sp_mode != "none") {
    m.reject("setpoint.mode", "must be none or products");
  }

  rc.steps = static_cast<int>(m.get_long("experiment.steps"));
  if (rc.steps < 1) m.reject("experiment.steps", "must be >= 1");
  rc.runs = static_cast<int>(m.get_long("experiment.runs"));
  if (rc.runs < 1) m.reject("experiment.runs", "must be >= 1");
  rc.base_seed = m.get_u64("experiment.base_seed");
  if (m.has("experiment.initial_state")) rc.initial_state = m.get_vector("experiment.initial_state");
  if (m.has("experiment.snapshot_times_hr")) {
    rc.snapshot_times_hr = m.get_list("experiment.snapshot_times_hr");
    for (double t : rc.snapshot_times_hr)
      if (!(t >= 0)) m.reject("experiment.snapshot_times_hr", "times must be nonnegative");
  }

  rc.out_dir = m.get_string("output.dir", "out");

  m.require_all_consumed();
  return rc;
}

// Load and validate the plant matrices referenced by a run configuration.
inline CaseData load_case_data(const RunConfig& rc) {
  LabeledBlocks blk = LabeledBlocks::read_file(rc.source_path);
  CaseData cd;
  cd.sys.A = blk.matrix("A");
  cd.sys.B = blk.matrix("B");
  cd.sys.G = blk.matrix("G");
  cd.sys.disturbance.sigma = blk.matrix("Sigma_w");
  cd.sys.disturbance.family = rc.family;
  cd.U_abs.H = blk.matrix("Hu");
  cd.U_abs.k = blk.vector("ku_abs");
  cd.X_abs.H = blk.matrix("Hx");
  cd.X_abs.k = blk.vector("kx_abs");
  cd.x_lin = blk.vector("x_lin");
  cd.u_lin = blk.vector("u_lin");
  cd.Q = blk.matrix("Q");
  cd.R = blk.matrix("R");

  if (cd.x_lin.size() != cd.sys.nx() || cd.u_lin.size() != cd.sys.nu())
    throw std::runtime_error(rc.source_path + ": linearization point dimensions are inconsistent");
  if (cd.Q.rows() != cd.sys.nx() || cd.R.rows() != cd.sys.nu())
    throw std::runtime_error(rc.source_path + ": weight dimensions are inconsistent");
  if (rc.initial_state.size() != 0 && rc.initial_state.size() != cd.sys.nx())
    throw std::runtime_error(rc.origin + ": experiment.initial_state length must be " +
                             std::to_string(cd.sys.nx()));
  for (Eigen::Index i : rc.setpoint.tracked)
    if (i >= cd.sys.nx())
      throw std::runtime_error(rc.origin + ": setpoint.tracked_states index out of range");
  return cd;
}

}  // namespace smpc
