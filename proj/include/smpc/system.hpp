#pragma once

// Plant description, constraint polytopes, disturbance model, Assumption-set
// validation, and the discrete Lyapunov solve used by the stability checks.

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

namespace smpc {

// --------------------------------------------------------------- polytopes
struct Polytope {
  Eigen::MatrixXd H;
  Eigen::VectorXd k;

  Eigen::Index rows() const { return H.rows(); }
  Eigen::Index dim() const { return H.cols(); }

  bool contains(const Eigen::VectorXd& x, double tol = 0.0) const {
    return ((H * x - k).array() <= tol).all();
  }
};

// ------------------------------------------------------ disturbance model
enum class DensityFamily { gaussian, uniform, laplace };

struct DisturbanceModel {
  Eigen::MatrixXd sigma;            // covariance, symmetric positive definite
  DensityFamily family = DensityFamily::gaussian;

  // The uniform family is the only one with bounded support.
  bool bounded_support() const { return family == DensityFamily::uniform; }

  Eigen::Index dim() const { return sigma.rows(); }
};

struct LinearStochasticSystem {
  Eigen::MatrixXd A;
  Eigen::MatrixXd B;
  Eigen::MatrixXd G;
  DisturbanceModel disturbance;

  Eigen::Index nx() const { return A.rows(); }
  Eigen::Index nu() const { return B.cols(); }
  Eigen::Index nw() const { return G.cols(); }
};

struct WeightSpec {
  Eigen::MatrixXd Q;                // state weight, PSD
  Eigen::MatrixXd R;                // input weight, PSD
  double rho = 0.0;                 // slack penalty, >= 0
};

// ------------------------------------------------------------- validation
struct ValidationItem {
  std::string name;
  bool pass = false;
  double witness = std::numeric_limits<double>::quiet_NaN();
  std::string note;
};

struct ValidationReport {
  std::vector<ValidationItem> items;

  bool all_pass() const {
    for (const auto& it : items)
      if (!it.pass) return false;
    return true;
  }
  const ValidationItem& item(const std::string& name) const {
    for (const auto& it : items)
      if (it.name == name) return it;
    throw std::runtime_error("no validation item named '" + name + "'");
  }
};

namespace detail {

// Two-phase dense tableau simplex for the tiny LPs used in validation and
// stability constants: maximize c'x subject to Hx <= k, x free. Free
// variables are split as x = xp - xm. Bland's rule prevents cycling; sizes
// here are a handful of rows and columns.
struct MicroLpResult {
  bool feasible = false;
  bool bounded = false;
  double value = 0.0;
  Eigen::VectorXd x;
};

inline MicroLpResult micro_lp_max(const Eigen::VectorXd& c, const Eigen::MatrixXd& H,
                                  const Eigen::VectorXd& k) {
  const int m = static_cast<int>(H.rows());
  const int n = static_cast<int>(H.cols());
  const int nv = 2 * n + m;  // xp, xm, slacks
  // Rows scaled so right sides are nonnegative; negative rows get artificials.
  Eigen::MatrixXd T(m + 1, nv + 1);
  T.setZero();
  std::vector<int> basis(m);
  std::vector<int> artificial;
  int n_art = 0;
  for (int i = 0; i < m; ++i)
    if (k[i] < 0) ++n_art;
  T.conservativeResize(m + 1, nv + n_art + 1);
  T.setZero();

  int art_col = nv;
  for (int i = 0; i < m; ++i) {
    double s = (k[i] < 0) ? -1.0 : 1.0;
    for (int j = 0; j < n; ++j) {
      T(i, j) = s * H(i, j);
      T(i, n + j) = -s * H(i, j);
    }
    T(i, 2 * n + i) = s;  // slack (negative coefficient once scaled)
    T(i, T.cols() - 1) = s * k[i];
    if (k[i] < 0) {
      T(i, art_col) = 1.0;
      basis[i] = art_col;
      artificial.push_back(art_col);
      ++art_col;
    } else {
      basis[i] = 2 * n + i;
    }
  }

  auto pivot = [&](int prow, int pcol) {
    T.row(prow) /= T(prow, pcol);
    for (int i = 0; i < T.rows(); ++i)
      if (i != prow && T(i, pcol) != 0.0) T.row(i) -= T(i, pcol) * T.row(prow);
    basis[prow] = pcol;
  };

  auto run_simplex = [&](int ncols) -> bool {  // returns false when unbounded
    for (int iter = 0; iter < 10000; ++iter) {
      int pcol = -1;  // Bland: smallest index with positive reduced profit
      for (int j = 0; j < ncols; ++j)
        if (T(m, j) > 1e-11) { pcol = j; break; }
      if (pcol < 0) return true;
      int prow = -1;
      double best = std::numeric_limits<double>::infinity();
      for (int i = 0; i < m; ++i) {
        if (T(i, pcol) > 1e-11) {
          double ratio = T(i, T.cols() - 1) / T(i, pcol);
          if (ratio < best - 1e-12 || (ratio < best + 1e-12 && (prow < 0 || basis[i] < basis[prow]))) {
            best = ratio;
            prow = i;
          }
        }
      }
      if (prow < 0) return false;
      pivot(prow, pcol);
    }
    return true;
  };

  MicroLpResult res;
  const int total = static_cast<int>(T.cols()) - 1;

  if (!artificial.empty()) {
    // Phase 1: minimize sum of artificials (maximize the negative).
    for (int col : artificial) T(m, col) = -1.0;
    for (int i = 0; i < m; ++i)
      if (T(m, basis[i]) != 0.0) T.row(m) -= T(m, basis[i]) * T.row(i);
    run_simplex(total);
    if (T(m, total) < -1e-9) return res;  // infeasible
    // Drive remaining artificials out of the basis where possible.
    for (int i = 0; i < m; ++i) {
      if (basis[i] >= nv) {
        for (int j = 0; j < nv; ++j)
          if (std::abs(T(i, j)) > 1e-9) { pivot(i, j); break; }
      }
    }
    T.row(m).setZero();
  }

  res.feasible = true;
  // Phase 2 objective: maximize c'(xp - xm).
  for (int j = 0; j < n; ++j) {
    T(m, j) = c[j];
    T(m, n + j) = -c[j];
  }
  for (int col : artificial) T(m, col) = -1.0;  // never profitable to re-enter
  for (int i = 0; i < m; ++i)
    if (T(m, basis[i]) != 0.0) T.row(m) -= T(m, basis[i]) * T.row(i);

  res.bounded = run_simplex(total);
  if (!res.bounded) return res;

  Eigen::VectorXd xv = Eigen::VectorXd::Zero(2 * n);
  for (int i = 0; i < m; ++i)
    if (basis[i] < 2 * n) xv[basis[i]] = T(i, total);
  res.x = xv.head(n) - xv.tail(n);
  res.value = c.dot(res.x);
  return res;
}

}  // namespace detail

// Checks the standing assumptions: Schur-stable A, consistent dimensions,
// SPD disturbance covariance, compact input set with 0 strictly interior.
inline ValidationReport validate_system(const LinearStochasticSystem& sys, const Polytope& U,
                                        const Polytope& X) {
  ValidationReport rep;

  auto add = [&](const std::string& name, bool pass, double witness, const std::string& note) {
    rep.items.push_back({name, pass, witness, note});
  };

  const bool dims_ok = sys.A.rows() == sys.A.cols() && sys.B.rows() == sys.A.rows() &&
                       sys.G.rows() == sys.A.rows() && sys.disturbance.sigma.rows() == sys.nw() &&
                       sys.disturbance.sigma.cols() == sys.nw() && U.dim() == sys.nu() &&
                       X.dim() == sys.nx() && U.rows() == U.k.size() && X.rows() == X.k.size();
  add("dimensions", dims_ok, static_cast<double>(sys.nx()), "A/B/G/Sigma/H shapes consistent");
  if (!dims_ok) return rep;

  const double radius = sys.A.eigenvalues().cwiseAbs().maxCoeff();
  add("schur_stable", radius < 1.0, radius, "spectral radius of A");

  add("state_observed", true, 0.0, "exact state observation assumed by construction");

  Eigen::LLT<Eigen::MatrixXd> llt(sys.disturbance.sigma);
  const double sym_err = (sys.disturbance.sigma - sys.disturbance.sigma.transpose()).norm();
  const bool spd = sym_err < 1e-12 * (1.0 + sys.disturbance.sigma.norm()) && llt.info() == Eigen::Success;
  double min_eig = std::numeric_limits<double>::quiet_NaN();
  if (spd) {
    min_eig = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(sys.disturbance.sigma)
                  .eigenvalues()
                  .minCoeff();
  }
  add("disturbance_spd", spd && min_eig > 0.0, min_eig, "min eigenvalue of Sigma_w");

  // Compactness: every coordinate LP max +-e_j'u over U must be bounded.
  bool bounded = true;
  for (Eigen::Index j = 0; j < sys.nu() && bounded; ++j) {
    for (double s : {1.0, -1.0}) {
      Eigen::VectorXd c = Eigen::VectorXd::Zero(sys.nu());
      c[j] = s;
      auto lp = detail::micro_lp_max(c, U.H, U.k);
      if (!lp.feasible || !lp.bounded) bounded = false;
    }
  }
  add("input_set_bounded", bounded, 0.0, "coordinate LPs bounded over U");

  const double interior_margin = bounded && U.k.size() > 0 ? U.k.minCoeff() : -1.0;
  add("input_origin_interior", interior_margin > 0.0, interior_margin, "min_i k_u,i (H_u 0 < k_u)");

  return rep;
}

// Solves A'PA - P = -I by the fixed-point iteration P <- A'PA + I, which
// converges geometrically for Schur-stable A at rate rho(A)^2.
inline Eigen::MatrixXd discrete_lyapunov(const Eigen::MatrixXd& A) {
  const double radius = A.eigenvalues().cwiseAbs().maxCoeff();
  if (!(radius < 1.0))
    throw std::runtime_error("unstable system: spectral radius " + std::to_string(radius));

  const Eigen::Index n = A.rows();
  Eigen::MatrixXd P = Eigen::MatrixXd::Identity(n, n);
  for (int iter = 0; iter < 10000; ++iter) {
    Eigen::MatrixXd next = A.transpose() * P * A + Eigen::MatrixXd::Identity(n, n);
    const double change = (next - P).norm();
    P = next;
    if (change <= 1e-12 * P.norm()) break;
  }
  return 0.5 * (P + P.transpose());
}

}  // namespace smpc
