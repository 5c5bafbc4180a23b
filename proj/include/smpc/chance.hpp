#pragma once

// Joint chance constraint handling: Boole risk allocation across the horizon
// and distribution-free Cantelli-Chebyshev tightening of each half-space row.

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

namespace smpc {

// One tightened row: the half-space h' x <= k at the given stage is enforced
// through the mean backoff delta and the variance cap alpha delta^2 / (1-alpha).
struct ChanceRow {
  int stage = 1;        // 1-based stage within the horizon
  int row = 0;          // 0-based row of the per-stage state polytope
  double alpha = 0.0;   // individual risk
  double delta = 0.0;   // mean backoff
  double variance_cap = 0.0;
};

struct ChanceSpec {
  double beta = 0.0;             // joint risk over the horizon
  std::vector<ChanceRow> rows;   // stage-major, matching the stacked selector order
};

// Cap on Var[h'x] that makes Cantelli certify Pr[h'x > k] <= alpha when the
// mean satisfies h' xbar <= k - delta.
inline double cantelli_variance_cap(double alpha, double delta) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::runtime_error("risk level must lie in (0,1)");
  if (!(delta > 0.0)) throw std::runtime_error("mean backoff must be positive");
  return alpha * delta * delta / (1.0 - alpha);
}

// One-sided Chebyshev (Cantelli) tail bound Pr[y - E y >= delta] <= v/(v+delta^2),
// valid for any distribution with variance v. Used by validity checks.
inline double cantelli_tail_bound(double variance, double delta) {
  if (delta <= 0.0) return 1.0;
  if (variance < 0.0) throw std::runtime_error("variance must be nonnegative");
  return variance / (variance + delta * delta);
}

// Uniform Boole allocation of the joint risk beta over r rows and N stages.
// deltas holds one backoff per polytope row, reused at every stage.
inline ChanceSpec build_chance_spec(double beta, const Eigen::VectorXd& deltas, int N) {
  if (!(beta > 0.0 && beta < 1.0)) throw std::runtime_error("joint risk must lie in (0,1)");
  if (N < 1) throw std::runtime_error("empty horizon");
  const int r = static_cast<int>(deltas.size());
  if (r < 1) throw std::runtime_error("state polytope needs at least one row");
  const double alpha = beta / (static_cast<double>(r) * N);
  ChanceSpec spec;
  spec.beta = beta;
  spec.rows.reserve(static_cast<size_t>(r) * N);
  for (int stage = 1; stage <= N; ++stage) {
    for (int j = 0; j < r; ++j) {
      ChanceRow row;
      row.stage = stage;
      row.row = j;
      row.alpha = alpha;
      row.delta = deltas[j];
      row.variance_cap = cantelli_variance_cap(alpha, deltas[j]);
      spec.rows.push_back(row);
    }
  }
  return spec;
}

// Allocation with one shared per-row risk level instead of a joint budget.
// The recorded beta is the Boole sum r*N*alpha, which may reach 1 when the
// per-row level is set aggressively; the per-row guarantee still holds.
inline ChanceSpec build_chance_spec_fixed_alpha(double alpha, const Eigen::VectorXd& deltas,
                                                int N) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::runtime_error("risk level must lie in (0,1)");
  if (N < 1) throw std::runtime_error("empty horizon");
  const int r = static_cast<int>(deltas.size());
  if (r < 1) throw std::runtime_error("state polytope needs at least one row");
  ChanceSpec spec;
  spec.beta = std::min(1.0, alpha * r * N);
  spec.rows.reserve(static_cast<size_t>(r) * N);
  for (int stage = 1; stage <= N; ++stage) {
    for (int j = 0; j < r; ++j) {
      ChanceRow row;
      row.stage = stage;
      row.row = j;
      row.alpha = alpha;
      row.delta = deltas[j];
      row.variance_cap = cantelli_variance_cap(alpha, deltas[j]);
      spec.rows.push_back(row);
    }
  }
  return spec;
}

// Explicit per-row risk levels (reused at every stage) under a declared joint
// budget; rejected when the Boole sum N * sum(alphas) exceeds beta.
inline ChanceSpec build_chance_spec_explicit(const Eigen::VectorXd& alphas, double beta,
                                             const Eigen::VectorXd& deltas, int N) {
  if (!(beta > 0.0 && beta <= 1.0)) throw std::runtime_error("joint risk must lie in (0,1]");
  if (N < 1) throw std::runtime_error("empty horizon");
  const int r = static_cast<int>(deltas.size());
  if (r < 1) throw std::runtime_error("state polytope needs at least one row");
  if (alphas.size() != r) throw std::runtime_error("risk list length must match the polytope rows");
  double sum = 0.0;
  for (int j = 0; j < r; ++j) {
    if (!(alphas[j] > 0.0 && alphas[j] < 1.0))
      throw std::runtime_error("risk level must lie in (0,1)");
    sum += alphas[j];
  }
  if (sum * N > beta + 1e-12)
    throw std::runtime_error("allocated risk exceeds the joint budget: sum over rows and stages " +
                             std::to_string(sum * N) + " > " + std::to_string(beta));
  ChanceSpec spec;
  spec.beta = beta;
  spec.rows.reserve(static_cast<size_t>(r) * N);
  for (int stage = 1; stage <= N; ++stage) {
    for (int j = 0; j < r; ++j) {
      ChanceRow row;
      row.stage = stage;
      row.row = j;
      row.alpha = alphas[j];
      row.delta = deltas[j];
      row.variance_cap = cantelli_variance_cap(alphas[j], deltas[j]);
      spec.rows.push_back(row);
    }
  }
  return spec;
}

// Sum of individual risks; must not exceed beta for the joint bound to hold.
inline double total_allocated_risk(const ChanceSpec& spec) {
  double s = 0.0;
  for (const auto& r : spec.rows) s += r.alpha;
  return s;
}

}  // namespace smpc
