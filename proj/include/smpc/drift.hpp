#pragma once

// Stochastic stability via a geometric drift condition: with P solving
// A'PA - P = -I and V(x) = x'Px, any control law confined to the compact
// input set satisfies E[V(x+)] <= lambda V(x) outside a ball D around the
// origin, which bounds E[V(x_t)] by lambda^t V(x0) + b (1 - lambda)^{-1}.
// This header computes the constants of that argument from the plant data and
// evaluates the resulting ceiling against simulated ensembles.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "smpc/system.hpp"

namespace smpc {

struct DriftConstants {
  Eigen::MatrixXd P;   // A'PA - P = -I
  double lmax_P = 0.0;
  double lmin_P = 0.0;
  double Ub = 0.0;     // max ||u||_1 over the input polytope
  double c1 = 0.0;     // ||B'PA||_inf Ub
  double c2 = 0.0;     // ||B'PB||_inf Ub^2 + tr(G'PG Sigma_w)
  double theta = 0.0;  // selected from the admissible interval
  double radius = 0.0; // D = { ||x||_inf <= radius }
  double lambda = 0.0; // contraction factor outside D
  double b = 0.0;      // bound on E[V(x+)] inside D
  bool theta_found = false;
};

namespace detail {

inline double matrix_inf_norm(const Eigen::MatrixXd& m) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < m.rows(); ++i) worst = std::max(worst, m.row(i).cwiseAbs().sum());
  return worst;
}

// Largest 1-norm over the polytope: maximize s'u over all sign vectors s.
inline double polytope_one_norm_bound(const Polytope& U) {
  const Eigen::Index n = U.dim();
  if (n > 20) throw std::runtime_error("drift: input dimension too large for sign enumeration");
  double best = 0.0;
  for (std::uint64_t mask = 0; mask < (1ULL << n); ++mask) {
    Eigen::VectorXd c(n);
    for (Eigen::Index i = 0; i < n; ++i) c[i] = (mask >> i) & 1 ? 1.0 : -1.0;
    const MicroLpResult lp = micro_lp_max(c, U.H, U.k);
    if (!lp.feasible || !lp.bounded)
      throw std::runtime_error("drift: input polytope must be nonempty and bounded");
    best = std::max(best, lp.value);
  }
  return best;
}

}  // namespace detail

// Constants of the drift argument. theta is chosen from a grid over the
// admissible interval (max(0, 1 - lmax(P)), 1) to minimize the asymptotic
// bound b / (1 - lambda).
inline DriftConstants compute_drift_constants(const LinearStochasticSystem& sys,
                                              const Polytope& U) {
  DriftConstants d;
  const Eigen::Index nx = sys.nx();
  d.P = discrete_lyapunov(sys.A);
  {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(d.P);
    d.lmax_P = es.eigenvalues().maxCoeff();
    d.lmin_P = es.eigenvalues().minCoeff();
  }
  d.Ub = detail::polytope_one_norm_bound(U);
  d.c1 = detail::matrix_inf_norm(sys.B.transpose() * d.P * sys.A) * d.Ub;
  d.c2 = detail::matrix_inf_norm(sys.B.transpose() * d.P * sys.B) * d.Ub * d.Ub +
         (sys.G.transpose() * d.P * sys.G * sys.disturbance.sigma).trace();

  const double lo = std::max(0.0, 1.0 - d.lmax_P);
  double best_asym = std::numeric_limits<double>::infinity();
  for (int i = 1; i <= 999; ++i) {
    const double theta = lo + (1.0 - lo) * static_cast<double>(i) / 1000.0;
    if (theta <= lo || theta >= 1.0) continue;
    const double r = (d.c1 + std::sqrt(d.c1 * d.c1 + d.c2 * theta)) / theta;
    const double lambda = 1.0 - (1.0 - theta) / d.lmax_P;
    // Inside D: E[V(x+)] <= x'A'PAx + 2 c1 ||x||_inf + c2 with
    // x'A'PAx = x'(P - I)x <= (lmax(P) - 1) nx r^2 over the box.
    const double b =
        std::max(0.0, d.lmax_P - 1.0) * static_cast<double>(nx) * r * r + 2.0 * d.c1 * r + d.c2;
    const double asym = b / (1.0 - lambda);
    if (lambda > 0.0 && lambda < 1.0 && asym < best_asym) {
      best_asym = asym;
      d.theta = theta;
      d.radius = r;
      d.lambda = lambda;
      d.b = b;
      d.theta_found = true;
    }
  }
  return d;
}

inline double lyapunov_value(const DriftConstants& d, const Eigen::VectorXd& x) {
  return x.dot(d.P * x);
}

// Ceiling on E[V(x_t)] implied by the drift recursion.
inline double drift_ceiling(const DriftConstants& d, double v0, int t) {
  if (!d.theta_found) return std::numeric_limits<double>::infinity();
  return std::pow(d.lambda, t) * v0 + d.b / (1.0 - d.lambda);
}

struct DriftReport {
  bool constants_valid = false;
  double theta = 0.0, radius = 0.0, lambda = 0.0, b = 0.0;
  double lmax_P = 0.0;
  double v0 = 0.0;                    // V at the common initial state
  double max_mean_V = 0.0;            // max over t of the ensemble mean of V
  int argmax_t = 0;
  double ceiling_at_argmax = 0.0;     // lambda^t V(x0) + b/(1-lambda) there
  bool below_ceiling = false;
  // Empirical drift outside D: mean of V(x_{t+1}) - lambda V(x_t), its
  // standard error, and the number of contributing transitions.
  double drift_mean = 0.0;
  double drift_se = 0.0;
  long drift_samples = 0;
  bool drift_nonpositive = false;     // mean <= 3 standard errors
  bool mean_V_finite = true;
};

// Ensemble check: states[run][t] are regulation-coordinate states (deviation
// from the active setpoint), all runs sharing states[run][0].
inline DriftReport evaluate_drift(const DriftConstants& d,
                                  const std::vector<std::vector<Eigen::VectorXd>>& states) {
  if (states.empty() || states.front().empty()) throw std::runtime_error("drift: empty ensemble");
  const size_t T1 = states.front().size();
  for (const auto& run : states)
    if (run.size() != T1) throw std::runtime_error("drift: ragged ensemble");

  DriftReport rep;
  rep.constants_valid = d.theta_found;
  rep.theta = d.theta;
  rep.radius = d.radius;
  rep.lambda = d.lambda;
  rep.b = d.b;
  rep.lmax_P = d.lmax_P;
  rep.v0 = lyapunov_value(d, states.front().front());

  double max_mean = -std::numeric_limits<double>::infinity();
  int argmax = 0;
  for (size_t t = 0; t < T1; ++t) {
    double acc = 0.0;
    for (const auto& run : states) acc += lyapunov_value(d, run[t]);
    const double mean = acc / static_cast<double>(states.size());
    if (!std::isfinite(mean)) rep.mean_V_finite = false;
    if (mean > max_mean) {
      max_mean = mean;
      argmax = static_cast<int>(t);
    }
  }
  rep.max_mean_V = max_mean;
  rep.argmax_t = argmax;
  rep.ceiling_at_argmax = drift_ceiling(d, rep.v0, argmax);
  rep.below_ceiling = rep.mean_V_finite && max_mean <= rep.ceiling_at_argmax;

  if (d.theta_found) {
    double sum = 0.0, sumsq = 0.0;
    long n = 0;
    for (const auto& run : states) {
      for (size_t t = 0; t + 1 < T1; ++t) {
        if (run[t].cwiseAbs().maxCoeff() <= d.radius) continue;
        const double inc = lyapunov_value(d, run[t + 1]) - d.lambda * lyapunov_value(d, run[t]);
        sum += inc;
        sumsq += inc * inc;
        ++n;
      }
    }
    rep.drift_samples = n;
    if (n > 1) {
      rep.drift_mean = sum / static_cast<double>(n);
      const double var =
          std::max(0.0, (sumsq - sum * sum / static_cast<double>(n)) / static_cast<double>(n - 1));
      rep.drift_se = std::sqrt(var / static_cast<double>(n));
      rep.drift_nonpositive = rep.drift_mean <= 3.0 * rep.drift_se;
    } else {
      // No excursions outside D: the drift premise is vacuously satisfied.
      rep.drift_nonpositive = true;
    }
  }
  return rep;
}

}  // namespace smpc
