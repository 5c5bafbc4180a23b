#pragma once

// Self-contained second-order cone solver: primal-dual interior-point method
// on the homogeneous self-dual embedding with Nesterov-Todd scaling and a
// Mehrotra predictor-corrector step.  The KKT system is factored with a
// sparse LDL' (AMD ordering, symbolic analysis cached across solves); each
// second-order cone enters the KKT matrix through a sparse rank-two
// expansion adding two auxiliary rows.  Ruiz equilibration (cone-uniform on
// cone rows) conditions the data; static regularization plus iterative
// refinement keep the factorization stable.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include "smpc/conic.hpp"

namespace smpc {

enum class SolveStatus { optimal, max_iterations, numerical_failure };

inline const char* to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::optimal: return "optimal";
    case SolveStatus::max_iterations: return "max-iterations";
    default: return "numerical-failure";
  }
}

struct SolverSettings {
  double tolerance = 1e-8;
  int max_iterations = 200;
  bool scaling = true;          // Ruiz equilibration on/off
  double static_reg = 1e-10;    // quasidefinite regularization
  int refinement_steps = 4;     // iterative refinement cap per KKT solve
  double step_fraction = 0.98;  // fraction-to-boundary
  bool verbose = false;         // per-iteration trace on stderr
};

struct ConicSolution {
  SolveStatus status = SolveStatus::numerical_failure;
  Eigen::VectorXd x;  // primal decision vector
  Eigen::VectorXd y;  // equality duals
  Eigen::VectorXd z;  // cone duals
  Eigen::VectorXd s;  // cone slacks
  double objective = std::numeric_limits<double>::quiet_NaN();
  double primal_residual = std::numeric_limits<double>::infinity();
  double dual_residual = std::numeric_limits<double>::infinity();
  double gap = std::numeric_limits<double>::infinity();
  double relative_gap = std::numeric_limits<double>::infinity();
  int iterations = 0;
  double wall_time_ms = 0.0;
  double factor_time_ms = 0.0;  // time in numeric KKT factorizations
  double kkt_time_ms = 0.0;     // time in KKT solves incl. refinement
  int kkt_passes = 0;           // triangular solve passes performed
  std::string diagnostics;
};

class ConicSolver {
 public:
  explicit ConicSolver(SolverSettings settings = {}) : settings_(settings) {}

  ConicSolution solve(const ConicProgram& prog) {
    const auto t0 = std::chrono::steady_clock::now();
    prog.validate();
    prepare(prog);
    factor_ms_ = kkt_ms_ = 0.0;
    kkt_passes_ = 0;
    ConicSolution sol = run(prog);
    sol.wall_time_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    sol.factor_time_ms = factor_ms_;
    sol.kkt_time_ms = kkt_ms_;
    sol.kkt_passes = kkt_passes_;
    return sol;
  }

 private:
  // ------------------------------------------------------------- structure
  struct Cone {
    Eigen::Index offset;  // into the z/s vectors
    Eigen::Index dim;
  };

  SolverSettings settings_;
  Eigen::Index n_ = 0, p_ = 0, mG_ = 0, l_ = 0;
  std::vector<Cone> cones_;
  Eigen::Index kdim_ = 0;
  std::vector<Eigen::Index> slot_of_row_;  // cone row -> KKT slot
  std::vector<Eigen::Index> aux1_, aux2_;  // per cone
  double cone_degree_ = 0.0;

  Eigen::SparseMatrix<double> As_, Gs_;  // equilibrated copies
  Eigen::VectorXd cs_, bs_, hs_;
  Eigen::VectorXd dcol_, erow_a_, erow_g_;  // equilibration scalings
  double sigma_obj_ = 1.0;

  Eigen::SparseMatrix<double> K_;  // upper triangle
  std::vector<Eigen::Index> ptr_a_, ptr_g_, ptr_diag_x_, ptr_diag_y_, ptr_lp_;
  std::vector<std::vector<Eigen::Index>> ptr_d_, ptr_u_, ptr_v_;
  std::vector<Eigen::Index> ptr_aux1_, ptr_aux2_;
  Eigen::VectorXd reg_sign_;  // +1 / -1 per KKT slot
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>, Eigen::Upper> ldlt_;
  bool pattern_ready_ = false;
  struct Fingerprint {
    Eigen::Index n, p, mG, l, annz, gnnz;
    std::vector<Eigen::Index> dims;
    bool operator==(const Fingerprint& o) const {
      return n == o.n && p == o.p && mG == o.mG && l == o.l && annz == o.annz && gnnz == o.gnnz &&
             dims == o.dims;
    }
  } fp_;

  // ------------------------------------------------------------- NT scaling
  struct LpScale {
    Eigen::VectorXd w2, lam;
  };
  struct SocScale {
    double eta = 1.0, a = 1.0;
    Eigen::VectorXd w;    // tail of the scaling point
    Eigen::VectorXd lam;  // scaled point W z
    // Rank-two expansion W^2 = D + su*uu' - sv*vv' with unit-norm u, v; the
    // magnitudes live on the auxiliary diagonal so ill-centered cones do not
    // amplify refinement residuals through the coupling columns.
    Eigen::VectorXd u, v;
    double su = 1.0, sv = 1.0;
    Eigen::VectorXd dhat;
  };
  LpScale lp_;
  std::vector<SocScale> soc_;

  // ---------------------------------------------------------------- set-up
  void prepare(const ConicProgram& prog) {
    Fingerprint fp{prog.num_vars, prog.A.rows(), prog.G.rows(), prog.num_lp, prog.A.nonZeros(),
                   prog.G.nonZeros(), prog.soc_dims};
    const bool same = pattern_ready_ && fp == fp_;
    fp_ = fp;
    n_ = prog.num_vars;
    p_ = prog.A.rows();
    mG_ = prog.G.rows();
    l_ = prog.num_lp;
    cones_.clear();
    Eigen::Index off = l_;
    for (Eigen::Index q : prog.soc_dims) {
      cones_.push_back({off, q});
      off += q;
    }
    cone_degree_ = static_cast<double>(l_ + static_cast<Eigen::Index>(cones_.size()));

    equilibrate(prog, same);

    if (!same) build_kkt_pattern();
    write_static_kkt_values();
    lp_.w2 = Eigen::VectorXd::Ones(l_);
    lp_.lam = Eigen::VectorXd::Ones(l_);
    soc_.assign(cones_.size(), SocScale{});
    for (size_t k = 0; k < cones_.size(); ++k) {
      const Eigen::Index q = cones_[k].dim;
      SocScale& S = soc_[k];
      S.w = Eigen::VectorXd::Zero(q - 1);
      S.lam = Eigen::VectorXd::Zero(q);
      // Identity scaling (a = 1, w = 0, eta = 1) expressed in expansion form.
      S.u = Eigen::VectorXd::Zero(q);
      S.u[0] = std::sqrt(2.0);
      S.su = 1.0;
      S.v = Eigen::VectorXd::Zero(q);
      S.v[0] = 1.0;
      S.sv = 1.0;
      S.dhat = Eigen::VectorXd::Ones(q);
      S.dhat[0] = 0.0;
    }
  }

  void equilibrate(const ConicProgram& prog, bool reuse_scalings) {
    if (!reuse_scalings || dcol_.size() != n_) {
      dcol_ = Eigen::VectorXd::Ones(n_);
      erow_a_ = Eigen::VectorXd::Ones(p_);
      erow_g_ = Eigen::VectorXd::Ones(mG_);
      if (settings_.scaling) ruiz(prog);
    }
    As_ = prog.A;
    Gs_ = prog.G;
    for (Eigen::Index j = 0; j < As_.outerSize(); ++j)
      for (Eigen::SparseMatrix<double>::InnerIterator it(As_, j); it; ++it)
        it.valueRef() *= erow_a_[it.row()] * dcol_[it.col()];
    for (Eigen::Index j = 0; j < Gs_.outerSize(); ++j)
      for (Eigen::SparseMatrix<double>::InnerIterator it(Gs_, j); it; ++it)
        it.valueRef() *= erow_g_[it.row()] * dcol_[it.col()];
    cs_ = dcol_.cwiseProduct(prog.c);
    sigma_obj_ = 1.0 / std::max(1.0, cs_.cwiseAbs().maxCoeff());
    cs_ *= sigma_obj_;
    bs_ = erow_a_.cwiseProduct(prog.b);
    hs_ = erow_g_.cwiseProduct(prog.h);
  }

  void ruiz(const ConicProgram& prog) {
    for (int sweep = 0; sweep < 5; ++sweep) {
      Eigen::VectorXd colmax = Eigen::VectorXd::Zero(n_);
      Eigen::VectorXd rowmax_a = Eigen::VectorXd::Zero(p_);
      Eigen::VectorXd rowmax_g = Eigen::VectorXd::Zero(mG_);
      for (Eigen::Index j = 0; j < prog.A.outerSize(); ++j)
        for (Eigen::SparseMatrix<double>::InnerIterator it(prog.A, j); it; ++it) {
          const double v = std::abs(it.value()) * erow_a_[it.row()] * dcol_[it.col()];
          colmax[it.col()] = std::max(colmax[it.col()], v);
          rowmax_a[it.row()] = std::max(rowmax_a[it.row()], v);
        }
      for (Eigen::Index j = 0; j < prog.G.outerSize(); ++j)
        for (Eigen::SparseMatrix<double>::InnerIterator it(prog.G, j); it; ++it) {
          const double v = std::abs(it.value()) * erow_g_[it.row()] * dcol_[it.col()];
          colmax[it.col()] = std::max(colmax[it.col()], v);
          rowmax_g[it.row()] = std::max(rowmax_g[it.row()], v);
        }
      // Rows of one cone block share a uniform factor to preserve geometry.
      for (const Cone& c : cones_) {
        const double m = rowmax_g.segment(c.offset, c.dim).maxCoeff();
        rowmax_g.segment(c.offset, c.dim).setConstant(m);
      }
      for (Eigen::Index j = 0; j < n_; ++j)
        if (colmax[j] > 0.0) dcol_[j] /= std::sqrt(colmax[j]);
      for (Eigen::Index i = 0; i < p_; ++i)
        if (rowmax_a[i] > 0.0) erow_a_[i] /= std::sqrt(rowmax_a[i]);
      for (Eigen::Index i = 0; i < mG_; ++i)
        if (rowmax_g[i] > 0.0) erow_g_[i] /= std::sqrt(rowmax_g[i]);
    }
  }

  void build_kkt_pattern() {
    slot_of_row_.assign(static_cast<size_t>(mG_), 0);
    aux1_.assign(cones_.size(), 0);
    aux2_.assign(cones_.size(), 0);
    for (Eigen::Index r = 0; r < l_; ++r) slot_of_row_[static_cast<size_t>(r)] = n_ + p_ + r;
    Eigen::Index at = n_ + p_ + l_;
    for (size_t k = 0; k < cones_.size(); ++k) {
      for (Eigen::Index i = 0; i < cones_[k].dim; ++i)
        slot_of_row_[static_cast<size_t>(cones_[k].offset + i)] = at + i;
      aux1_[k] = at + cones_[k].dim;
      aux2_[k] = at + cones_[k].dim + 1;
      at += cones_[k].dim + 2;
    }
    kdim_ = at;

    reg_sign_ = Eigen::VectorXd::Ones(kdim_);
    reg_sign_.segment(n_, p_).setConstant(-1.0);
    for (Eigen::Index r = 0; r < mG_; ++r) reg_sign_[slot_of_row_[static_cast<size_t>(r)]] = -1.0;
    for (size_t k = 0; k < cones_.size(); ++k) {
      reg_sign_[aux1_[k]] = 1.0;
      reg_sign_[aux2_[k]] = -1.0;
    }

    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(static_cast<size_t>(As_.nonZeros() + Gs_.nonZeros() + kdim_) +
                 3 * static_cast<size_t>(mG_));
    for (Eigen::Index i = 0; i < kdim_; ++i) trip.emplace_back(static_cast<int>(i), static_cast<int>(i), 1.0);
    for (Eigen::Index j = 0; j < As_.outerSize(); ++j)
      for (Eigen::SparseMatrix<double>::InnerIterator it(As_, j); it; ++it)
        trip.emplace_back(static_cast<int>(it.col()), static_cast<int>(n_ + it.row()), 1.0);
    for (Eigen::Index j = 0; j < Gs_.outerSize(); ++j)
      for (Eigen::SparseMatrix<double>::InnerIterator it(Gs_, j); it; ++it)
        trip.emplace_back(static_cast<int>(it.col()),
                          static_cast<int>(slot_of_row_[static_cast<size_t>(it.row())]), 1.0);
    for (size_t k = 0; k < cones_.size(); ++k)
      for (Eigen::Index i = 0; i < cones_[k].dim; ++i) {
        const Eigen::Index slot = slot_of_row_[static_cast<size_t>(cones_[k].offset + i)];
        trip.emplace_back(static_cast<int>(slot), static_cast<int>(aux1_[k]), 1.0);
        trip.emplace_back(static_cast<int>(slot), static_cast<int>(aux2_[k]), 1.0);
      }
    K_.resize(kdim_, kdim_);
    K_.setFromTriplets(trip.begin(), trip.end());
    K_.makeCompressed();

    ptr_a_.clear();
    ptr_g_.clear();
    for (Eigen::Index j = 0; j < As_.outerSize(); ++j)
      for (Eigen::SparseMatrix<double>::InnerIterator it(As_, j); it; ++it)
        ptr_a_.push_back(find_ptr(it.col(), n_ + it.row()));
    for (Eigen::Index j = 0; j < Gs_.outerSize(); ++j)
      for (Eigen::SparseMatrix<double>::InnerIterator it(Gs_, j); it; ++it)
        ptr_g_.push_back(find_ptr(it.col(), slot_of_row_[static_cast<size_t>(it.row())]));
    ptr_diag_x_.clear();
    ptr_diag_y_.clear();
    ptr_lp_.clear();
    for (Eigen::Index i = 0; i < n_; ++i) ptr_diag_x_.push_back(find_ptr(i, i));
    for (Eigen::Index i = 0; i < p_; ++i) ptr_diag_y_.push_back(find_ptr(n_ + i, n_ + i));
    for (Eigen::Index r = 0; r < l_; ++r) {
      const Eigen::Index s = slot_of_row_[static_cast<size_t>(r)];
      ptr_lp_.push_back(find_ptr(s, s));
    }
    ptr_d_.assign(cones_.size(), {});
    ptr_u_.assign(cones_.size(), {});
    ptr_v_.assign(cones_.size(), {});
    ptr_aux1_.assign(cones_.size(), 0);
    ptr_aux2_.assign(cones_.size(), 0);
    for (size_t k = 0; k < cones_.size(); ++k) {
      for (Eigen::Index i = 0; i < cones_[k].dim; ++i) {
        const Eigen::Index s = slot_of_row_[static_cast<size_t>(cones_[k].offset + i)];
        ptr_d_[k].push_back(find_ptr(s, s));
        ptr_u_[k].push_back(find_ptr(s, aux1_[k]));
        ptr_v_[k].push_back(find_ptr(s, aux2_[k]));
      }
      ptr_aux1_[k] = find_ptr(aux1_[k], aux1_[k]);
      ptr_aux2_[k] = find_ptr(aux2_[k], aux2_[k]);
    }
    ldlt_.analyzePattern(K_);
    pattern_ready_ = true;
  }

  Eigen::Index find_ptr(Eigen::Index row, Eigen::Index col) {
    for (Eigen::Index idx = K_.outerIndexPtr()[col]; idx < K_.outerIndexPtr()[col + 1]; ++idx)
      if (K_.innerIndexPtr()[idx] == row) return idx;
    throw std::runtime_error("internal: KKT slot not found");
  }

  void write_static_kkt_values() {
    if (!pattern_ready_) return;
    double* val = K_.valuePtr();
    const double d = settings_.static_reg;
    {
      size_t idx = 0;
      for (Eigen::Index j = 0; j < As_.outerSize(); ++j)
        for (Eigen::SparseMatrix<double>::InnerIterator it(As_, j); it; ++it)
          val[ptr_a_[idx++]] = it.value();
    }
    {
      size_t idx = 0;
      for (Eigen::Index j = 0; j < Gs_.outerSize(); ++j)
        for (Eigen::SparseMatrix<double>::InnerIterator it(Gs_, j); it; ++it)
          val[ptr_g_[idx++]] = it.value();
    }
    for (Eigen::Index i = 0; i < n_; ++i) val[ptr_diag_x_[static_cast<size_t>(i)]] = d;
    for (Eigen::Index i = 0; i < p_; ++i) val[ptr_diag_y_[static_cast<size_t>(i)]] = -d;
  }

  // Writes the scaling-dependent blocks; returns false if factorization fails.
  bool refactor() {
    double* val = K_.valuePtr();
    const double d = settings_.static_reg;
    for (Eigen::Index r = 0; r < l_; ++r) val[ptr_lp_[static_cast<size_t>(r)]] = -lp_.w2[r] - d;
    for (size_t k = 0; k < cones_.size(); ++k) {
      const SocScale& S = soc_[k];
      for (Eigen::Index i = 0; i < cones_[k].dim; ++i) {
        val[ptr_d_[k][static_cast<size_t>(i)]] = -S.dhat[i] - d;
        val[ptr_u_[k][static_cast<size_t>(i)]] = S.u[i];
        val[ptr_v_[k][static_cast<size_t>(i)]] = S.v[i];
      }
      val[ptr_aux1_[k]] = 1.0 / S.su + d;
      val[ptr_aux2_[k]] = -1.0 / S.sv - d;
    }
    const auto tf = std::chrono::steady_clock::now();
    ldlt_.factorize(K_);
    factor_ms_ +=
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - tf).count();
    return ldlt_.info() == Eigen::Success;
  }

  // K (without regularization) times a KKT-space vector.
  Eigen::VectorXd apply_kkt(const Eigen::VectorXd& v) const {
    Eigen::VectorXd out = K_.selfadjointView<Eigen::Upper>() * v;
    out -= settings_.static_reg * reg_sign_.cwiseProduct(v);
    return out;
  }

  mutable double last_solve_residual_ = 0.0;
  mutable double factor_ms_ = 0.0, kkt_ms_ = 0.0;
  mutable int kkt_passes_ = 0;

  // Refinement is adaptive: it stops once the residual is at noise level or no
  // longer monotonically improving (the latter guards against the amplified
  // round-off of nearly degenerate late-stage scalings).
  Eigen::VectorXd solve_kkt(const Eigen::VectorXd& rhs) const {
    const auto ts = std::chrono::steady_clock::now();
    Eigen::VectorXd x = ldlt_.solve(rhs);
    ++kkt_passes_;
    const double scale = 1.0 + rhs.cwiseAbs().maxCoeff();
    Eigen::VectorXd r = rhs - apply_kkt(x);
    double res = r.cwiseAbs().maxCoeff();
    for (int it = 0; it < settings_.refinement_steps && res > 1e-13 * scale; ++it) {
      const Eigen::VectorXd xc = x + ldlt_.solve(r);
      ++kkt_passes_;
      Eigen::VectorXd rc = rhs - apply_kkt(xc);
      const double resc = rc.cwiseAbs().maxCoeff();
      if (!(resc < res)) break;
      x = xc;
      r.swap(rc);
      res = resc;
    }
    last_solve_residual_ = res;
    kkt_ms_ +=
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - ts).count();
    return x;
  }

  Eigen::VectorXd embed(const Eigen::VectorXd& rx, const Eigen::VectorXd& ry,
                        const Eigen::VectorXd& rz) const {
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(kdim_);
    rhs.head(n_) = rx;
    rhs.segment(n_, p_) = ry;
    for (Eigen::Index r = 0; r < mG_; ++r) rhs[slot_of_row_[static_cast<size_t>(r)]] = rz[r];
    return rhs;
  }

  Eigen::VectorXd extract_z(const Eigen::VectorXd& sol) const {
    Eigen::VectorXd z(mG_);
    for (Eigen::Index r = 0; r < mG_; ++r) z[r] = sol[slot_of_row_[static_cast<size_t>(r)]];
    return z;
  }

  // ------------------------------------------------------------- cone algebra
  static double soc_margin(const Eigen::Ref<const Eigen::VectorXd>& v) {
    if (v.size() == 1) return v[0];
    return v[0] - v.tail(v.size() - 1).norm();
  }

  bool update_scalings(const Eigen::VectorXd& s, const Eigen::VectorXd& z) {
    for (Eigen::Index r = 0; r < l_; ++r) {
      if (s[r] <= 0.0 || z[r] <= 0.0) return false;
      lp_.w2[r] = s[r] / z[r];
      lp_.lam[r] = std::sqrt(s[r] * z[r]);
    }
    for (size_t k = 0; k < cones_.size(); ++k) {
      const Eigen::Index off = cones_[k].offset, q = cones_[k].dim;
      const auto sk = s.segment(off, q), zk = z.segment(off, q);
      double s_res, z_res;
      if (q == 1) {
        s_res = sk[0] * sk[0];
        z_res = zk[0] * zk[0];
        if (sk[0] <= 0.0 || zk[0] <= 0.0) return false;
      } else {
        // Factored form avoids cancellation when the point is near the
        // boundary; both factors are positive in the interior.
        const double sn = sk.tail(q - 1).norm(), zn = zk.tail(q - 1).norm();
        s_res = (sk[0] - sn) * (sk[0] + sn);
        z_res = (zk[0] - zn) * (zk[0] + zn);
        if (s_res <= 0.0 || z_res <= 0.0 || sk[0] <= 0.0 || zk[0] <= 0.0) return false;
      }
      SocScale& S = soc_[k];
      const double snorm = std::sqrt(s_res), znorm = std::sqrt(z_res);
      S.eta = std::sqrt(snorm / znorm);
      Eigen::VectorXd sbar = sk / snorm, zbar = zk / znorm;
      const double gamma = std::sqrt(0.5 * (1.0 + sbar.dot(zbar)));
      Eigen::VectorXd wbar(q);
      wbar[0] = (sbar[0] + zbar[0]) / (2.0 * gamma);
      if (q > 1)
        wbar.tail(q - 1) = (sbar.tail(q - 1) - zbar.tail(q - 1)) / (2.0 * gamma);
      S.a = wbar[0];
      S.w = wbar.tail(q - 1);
      // W^2 = eta^2 (2 wbar wbar' - J) = D + su*uu' - sv*vv' with
      // D = eta^2 diag(a^2-1, I), u = sqrt(2) eta (a; w), v = eta (a; 0).
      const double e2 = S.eta * S.eta;
      S.dhat.resize(q);
      S.dhat[0] = e2 * std::max(S.a * S.a - 1.0, 0.0);
      S.dhat.tail(q - 1).setConstant(e2);
      S.u.resize(q);
      S.u[0] = S.eta * std::sqrt(2.0) * S.a;
      S.u.tail(q - 1) = S.eta * std::sqrt(2.0) * S.w;
      S.su = 1.0;
      S.v = Eigen::VectorXd::Zero(q);
      S.v[0] = S.eta * S.a;
      S.sv = 1.0;
      S.lam = apply_w(k, zk);
    }
    return true;
  }

  Eigen::VectorXd apply_w(size_t k, const Eigen::Ref<const Eigen::VectorXd>& x) const {
    const SocScale& S = soc_[k];
    const Eigen::Index q = x.size();
    Eigen::VectorXd out(q);
    if (q == 1) {
      out[0] = S.eta * S.a * x[0];
      return out;
    }
    const double t = S.w.dot(x.tail(q - 1));
    out[0] = S.eta * (S.a * x[0] + t);
    out.tail(q - 1) = S.eta * (x.tail(q - 1) + (x[0] + t / (1.0 + S.a)) * S.w);
    return out;
  }

  Eigen::VectorXd apply_winv(size_t k, const Eigen::Ref<const Eigen::VectorXd>& x) const {
    const SocScale& S = soc_[k];
    const Eigen::Index q = x.size();
    Eigen::VectorXd out(q);
    if (q == 1) {
      out[0] = x[0] / (S.eta * S.a);
      return out;
    }
    const double t = S.w.dot(x.tail(q - 1));
    out[0] = (S.a * x[0] - t) / S.eta;
    out.tail(q - 1) = (x.tail(q - 1) + (-x[0] + t / (1.0 + S.a)) * S.w) / S.eta;
    return out;
  }

  // W applied blockwise to a full cone-space vector.
  Eigen::VectorXd apply_w_full(const Eigen::VectorXd& x) const {
    Eigen::VectorXd out(mG_);
    out.head(l_) = lp_.w2.cwiseSqrt().cwiseProduct(x.head(l_));
    for (size_t k = 0; k < cones_.size(); ++k)
      out.segment(cones_[k].offset, cones_[k].dim) =
          apply_w(k, x.segment(cones_[k].offset, cones_[k].dim));
    return out;
  }

  Eigen::VectorXd apply_winv_full(const Eigen::VectorXd& x) const {
    Eigen::VectorXd out(mG_);
    out.head(l_) = x.head(l_).cwiseQuotient(lp_.w2.cwiseSqrt());
    for (size_t k = 0; k < cones_.size(); ++k)
      out.segment(cones_[k].offset, cones_[k].dim) =
          apply_winv(k, x.segment(cones_[k].offset, cones_[k].dim));
    return out;
  }

  Eigen::VectorXd apply_w2_full(const Eigen::VectorXd& x) const {
    return apply_w_full(apply_w_full(x));
  }

  // Jordan product u o v blockwise.
  Eigen::VectorXd jordan_prod(const Eigen::VectorXd& u, const Eigen::VectorXd& v) const {
    Eigen::VectorXd out(mG_);
    out.head(l_) = u.head(l_).cwiseProduct(v.head(l_));
    for (size_t k = 0; k < cones_.size(); ++k) {
      const Eigen::Index off = cones_[k].offset, q = cones_[k].dim;
      out[off] = u.segment(off, q).dot(v.segment(off, q));
      if (q > 1)
        out.segment(off + 1, q - 1) =
            u[off] * v.segment(off + 1, q - 1) + v[off] * u.segment(off + 1, q - 1);
    }
    return out;
  }

  // Solves lambda o d = w blockwise.
  Eigen::VectorXd jordan_div_lambda(const Eigen::VectorXd& w) const {
    Eigen::VectorXd out(mG_);
    out.head(l_) = w.head(l_).cwiseQuotient(lp_.lam);
    for (size_t k = 0; k < cones_.size(); ++k) {
      const Eigen::Index off = cones_[k].offset, q = cones_[k].dim;
      const Eigen::VectorXd& lam = soc_[k].lam;
      if (q == 1) {
        out[off] = w[off] / lam[0];
        continue;
      }
      const double denom = lam[0] * lam[0] - lam.tail(q - 1).squaredNorm();
      const double d0 = (lam[0] * w[off] - lam.tail(q - 1).dot(w.segment(off + 1, q - 1))) / denom;
      out[off] = d0;
      out.segment(off + 1, q - 1) = (w.segment(off + 1, q - 1) - d0 * lam.tail(q - 1)) / lam[0];
    }
    return out;
  }

  Eigen::VectorXd cone_identity() const {
    Eigen::VectorXd e = Eigen::VectorXd::Zero(mG_);
    e.head(l_).setOnes();
    for (const Cone& c : cones_) e[c.offset] = 1.0;
    return e;
  }

  // Largest step alpha with v + alpha dv remaining in the cone.
  double max_step(const Eigen::VectorXd& v, const Eigen::VectorXd& dv) const {
    double alpha = std::numeric_limits<double>::infinity();
    for (Eigen::Index r = 0; r < l_; ++r)
      if (dv[r] < 0.0) alpha = std::min(alpha, -v[r] / dv[r]);
    for (const Cone& c : cones_) {
      const auto vk = v.segment(c.offset, c.dim), dk = dv.segment(c.offset, c.dim);
      if (c.dim == 1) {
        if (dk[0] < 0.0) alpha = std::min(alpha, -vk[0] / dk[0]);
        continue;
      }
      const double c2 = dk[0] * dk[0] - dk.tail(c.dim - 1).squaredNorm();
      const double c1 = 2.0 * (vk[0] * dk[0] - vk.tail(c.dim - 1).dot(dk.tail(c.dim - 1)));
      const double vn = vk.tail(c.dim - 1).norm();
      const double c0 = std::max((vk[0] - vn) * (vk[0] + vn), 0.0);
      double root = std::numeric_limits<double>::infinity();
      if (std::abs(c2) < 1e-300) {
        if (c1 < 0.0) root = -c0 / c1;
      } else {
        const double disc = c1 * c1 - 4.0 * c2 * c0;
        if (disc >= 0.0) {
          const double sq = std::sqrt(disc);
          // Numerically stable pair of roots.
          const double qq = -0.5 * (c1 + (c1 >= 0.0 ? sq : -sq));
          const double r1 = qq / c2, r2 = (qq != 0.0) ? c0 / qq : std::numeric_limits<double>::infinity();
          if (r1 > 0.0) root = std::min(root, r1);
          if (r2 > 0.0) root = std::min(root, r2);
        } else if (c2 < 0.0) {
          root = 0.0;  // should not happen for interior v
        }
      }
      if (dk[0] < 0.0) root = std::min(root, -vk[0] / dk[0]);
      alpha = std::min(alpha, root);
    }
    return alpha;
  }

  // Shift a candidate point into the interior, matching the standard
  // cone-interior initialization.
  void bring_to_cone(Eigen::VectorXd& v) const {
    double margin = std::numeric_limits<double>::infinity();
    for (Eigen::Index r = 0; r < l_; ++r) margin = std::min(margin, v[r]);
    for (const Cone& c : cones_) margin = std::min(margin, soc_margin(v.segment(c.offset, c.dim)));
    if (margin < 0.0) {
      const Eigen::VectorXd e = cone_identity();
      v += (1.0 - margin) * e;
    } else {
      v += cone_identity();
    }
  }

  // ------------------------------------------------------------------- loop
  ConicSolution run(const ConicProgram& prog) {
    ConicSolution sol;
    std::ostringstream diag;

    // Identity-scaling factorization for the starting point.
    if (!refactor()) {
      sol.diagnostics = "initial KKT factorization failed";
      return sol;
    }

    Eigen::VectorXd x(n_), y(p_), z(mG_), s(mG_);
    {
      const Eigen::VectorXd q1 = solve_kkt(embed(Eigen::VectorXd::Zero(n_), bs_, hs_));
      x = q1.head(n_);
      s = -extract_z(q1);
      bring_to_cone(s);
      const Eigen::VectorXd q2 = solve_kkt(embed(-cs_, Eigen::VectorXd::Zero(p_), Eigen::VectorXd::Zero(mG_)));
      y = q2.segment(n_, p_);
      z = extract_z(q2);
      bring_to_cone(z);
    }
    double tau = 1.0, kappa = 1.0;

    const double tol = settings_.tolerance;
    int stall = 0;
    double min_pivot = std::numeric_limits<double>::infinity(), max_pivot = 0.0;

    // Best iterate seen, reported on non-optimal exits.
    struct Best {
      double score = std::numeric_limits<double>::infinity();
      Eigen::VectorXd x, y, z, s;
      double objective = std::numeric_limits<double>::quiet_NaN();
      double pres = 0, dres = 0, gap = 0, relgap = 0;
    } best;
    auto finish_with_best = [&](ConicSolution& out) {
      if (!best.x.size()) return;
      out.x = best.x;
      out.y = best.y;
      out.z = best.z;
      out.s = best.s;
      out.objective = best.objective;
      out.primal_residual = best.pres;
      out.dual_residual = best.dres;
      out.gap = best.gap;
      out.relative_gap = best.relgap;
    };

    for (int iter = 0; iter <= settings_.max_iterations; ++iter) {
      sol.iterations = iter;

      // Residuals of the homogeneous embedding (scaled data).
      const Eigen::VectorXd rx = As_.transpose() * y + Gs_.transpose() * z + cs_ * tau;
      const Eigen::VectorXd ry = As_ * x - bs_ * tau;
      const Eigen::VectorXd rz = Gs_ * x + s - hs_ * tau;
      const double rtau = cs_.dot(x) + bs_.dot(y) + hs_.dot(z) + kappa;

      // Convergence metrics on the original data.
      const Eigen::VectorXd xu = dcol_.cwiseProduct(x) / tau;
      const Eigen::VectorXd yu = erow_a_.cwiseProduct(y) / (sigma_obj_ * tau);
      const Eigen::VectorXd zu = erow_g_.cwiseProduct(z) / (sigma_obj_ * tau);
      const Eigen::VectorXd su = s.cwiseQuotient(erow_g_) / tau;
      const double pcost = prog.c.dot(xu);
      double pres = 0.0;
      if (p_ > 0)
        pres = (prog.A * xu - prog.b).cwiseAbs().maxCoeff() /
               std::max(1.0, prog.b.cwiseAbs().maxCoeff());
      if (mG_ > 0)
        pres = std::max(pres, (prog.G * xu + su - prog.h).cwiseAbs().maxCoeff() /
                                  std::max(1.0, prog.h.cwiseAbs().maxCoeff()));
      Eigen::VectorXd dres_vec = prog.c;
      if (p_ > 0) dres_vec += prog.A.transpose() * yu;
      if (mG_ > 0) dres_vec += prog.G.transpose() * zu;
      const double dres =
          dres_vec.cwiseAbs().maxCoeff() / std::max(1.0, prog.c.cwiseAbs().maxCoeff());
      const double gap = su.dot(zu);
      const double relgap = std::abs(gap) / std::max(1.0, std::abs(pcost));

      sol.primal_residual = pres;
      sol.dual_residual = dres;
      sol.gap = gap;
      sol.relative_gap = relgap;

      const double score = std::max({pres, dres, std::min(std::abs(gap), relgap)});
      if (std::isfinite(score) && score < best.score && xu.allFinite()) {
        best.score = score;
        best.x = xu;
        best.y = yu;
        best.z = zu;
        best.s = su;
        best.objective = pcost + prog.objective_constant;
        best.pres = pres;
        best.dres = dres;
        best.gap = gap;
        best.relgap = relgap;
      }

      if (settings_.verbose) {
        std::fprintf(stderr,
                     "it %3d  pres %9.2e  dres %9.2e  relgap %9.2e  pcost %+12.5e  tau %9.2e  "
                     "kappa %9.2e\n",
                     iter, pres, dres, relgap, pcost, tau, kappa);
      }

      if (pres <= tol && dres <= tol && (gap <= tol || relgap <= tol)) {
        sol.status = SolveStatus::optimal;
        sol.x = xu;
        sol.y = yu;
        sol.z = zu;
        sol.s = su;
        sol.objective = pcost + prog.objective_constant;
        return sol;
      }
      if (iter == settings_.max_iterations) break;

      // Divergence of the embedding signals an ill-posed (infeasible or
      // unbounded) program; the softened SMPC program never produces one.
      if (tau <= 1e-12 * std::max(1.0, kappa)) {
        diag << "tau collapsed (tau=" << tau << ", kappa=" << kappa
             << "): infeasibility/unboundedness certificate; ";
        sol.diagnostics = diag.str();
        finish_with_best(sol);
        return sol;
      }

      if (!update_scalings(s, z)) {
        diag << "iterate left the cone interior at iteration " << iter << "; ";
        sol.diagnostics = diag.str();
        finish_with_best(sol);
        return sol;
      }
      if (!refactor()) {
        diag << "KKT factorization failed at iteration " << iter << "; ";
        sol.diagnostics = diag.str();
        finish_with_best(sol);
        return sol;
      }
      {
        const auto& Dvec = ldlt_.vectorD();
        min_pivot = Dvec.cwiseAbs().minCoeff();
        max_pivot = Dvec.cwiseAbs().maxCoeff();
      }

      const double mu = (s.dot(z) + tau * kappa) / (cone_degree_ + 1.0);

      // Solve with the (-c, b, h) right-hand side, shared by both directions.
      const Eigen::VectorXd q1 = solve_kkt(embed(-cs_, bs_, hs_));
      const Eigen::VectorXd x1 = q1.head(n_);
      const Eigen::VectorXd y1 = q1.segment(n_, p_);
      const Eigen::VectorXd z1 = extract_z(q1);
      const double denom = cs_.dot(x1) + bs_.dot(y1) + hs_.dot(z1) - kappa / tau;
      if (!std::isfinite(denom) || std::abs(denom) < 1e-300) {
        diag << "degenerate tau step denominator; ";
        sol.diagnostics = diag.str();
        finish_with_best(sol);
        return sol;
      }

      auto directions = [&](double eta, const Eigen::VectorXd& ds_scaled, double dkappa_rhs,
                            Eigen::VectorXd& dx, Eigen::VectorXd& dy, Eigen::VectorXd& dz,
                            Eigen::VectorXd& ds, double& dtau, double& dkappa) {
        const Eigen::VectorXd rhs_z = -eta * rz - apply_w_full(ds_scaled);
        const Eigen::VectorXd q2 = solve_kkt(embed(-eta * rx, -eta * ry, rhs_z));
        const Eigen::VectorXd x2 = q2.head(n_);
        const Eigen::VectorXd y2 = q2.segment(n_, p_);
        const Eigen::VectorXd z2 = extract_z(q2);
        dtau = (-eta * rtau - cs_.dot(x2) - bs_.dot(y2) - hs_.dot(z2) - dkappa_rhs / tau) / denom;
        dx = x2 + dtau * x1;
        dy = y2 + dtau * y1;
        dz = z2 + dtau * z1;
        ds = apply_w_full(ds_scaled - apply_w_full(dz));
        dkappa = (dkappa_rhs - kappa * dtau) / tau;
        if (settings_.verbose) {
          const double e1 = (As_.transpose() * dy + Gs_.transpose() * dz + cs_ * dtau + eta * rx)
                                .cwiseAbs().maxCoeff();
          const double e2 = p_ > 0 ? (As_ * dx - bs_ * dtau + eta * ry).cwiseAbs().maxCoeff() : 0.0;
          const double e3 =
              (Gs_ * dx + ds - hs_ * dtau + eta * rz).cwiseAbs().maxCoeff();
          // Mismatch between the rank-two expansion and W applied twice.
          double e4 = 0.0;
          for (size_t k = 0; k < cones_.size(); ++k) {
            const auto dzk = dz.segment(cones_[k].offset, cones_[k].dim);
            const SocScale& S = soc_[k];
            Eigen::VectorXd exp_v = S.dhat.cwiseProduct(dzk) + S.su * S.u * S.u.dot(dzk) -
                                    S.sv * S.v * S.v.dot(dzk);
            Eigen::VectorXd sq_v = apply_w(k, apply_w(k, dzk));
            e4 = std::max(e4, (exp_v - sq_v).cwiseAbs().maxCoeff());
          }
          double umax = 0.0, dhmax = 0.0;
          for (const SocScale& S : soc_) {
            umax = std::max(umax, S.u.cwiseAbs().maxCoeff());
            dhmax = std::max(dhmax, S.dhat.maxCoeff());
          }
          std::fprintf(stderr,
                       "        newton err: dual %9.2e  eq %9.2e  ineq %9.2e  mismatch %9.2e  "
                       "kktres %9.2e  umax %9.2e  dhmax %9.2e\n",
                       e1, e2, e3, e4, last_solve_residual_, umax, dhmax);
        }
      };

      // Predictor (affine) direction.
      Eigen::VectorXd lam_full(mG_);
      lam_full.head(l_) = lp_.lam;
      for (size_t k = 0; k < cones_.size(); ++k)
        lam_full.segment(cones_[k].offset, cones_[k].dim) = soc_[k].lam;

      Eigen::VectorXd dxa, dya, dza, dsa;
      double dtaua, dkappaa;
      directions(1.0, -lam_full, -tau * kappa, dxa, dya, dza, dsa, dtaua, dkappaa);

      double alpha_aff = std::min(max_step(s, dsa), max_step(z, dza));
      if (dtaua < 0.0) alpha_aff = std::min(alpha_aff, -tau / dtaua);
      if (dkappaa < 0.0) alpha_aff = std::min(alpha_aff, -kappa / dkappaa);
      alpha_aff = std::min(alpha_aff, 1.0);
      const double sigma = std::pow(1.0 - alpha_aff, 3);

      // Corrector (combined) direction.
      const Eigen::VectorXd u_sc = apply_winv_full(dsa);
      const Eigen::VectorXd v_sc = apply_w_full(dza);
      Eigen::VectorXd comp = -jordan_prod(lam_full, lam_full) - jordan_prod(u_sc, v_sc) +
                             sigma * mu * cone_identity();
      const Eigen::VectorXd ds_scaled = jordan_div_lambda(comp);
      const double dkappa_rhs = sigma * mu - tau * kappa - dtaua * dkappaa;

      Eigen::VectorXd dx, dy, dz, ds;
      double dtau, dkappa;
      directions(1.0 - sigma, ds_scaled, dkappa_rhs, dx, dy, dz, ds, dtau, dkappa);

      double alpha = std::min(max_step(s, ds), max_step(z, dz));
      if (dtau < 0.0) alpha = std::min(alpha, -tau / dtau);
      if (dkappa < 0.0) alpha = std::min(alpha, -kappa / dkappa);
      alpha = std::min(settings_.step_fraction * alpha, 1.0);

      if (!std::isfinite(alpha) || alpha <= 1e-10) {
        if (++stall >= 2) {
          diag << "step size collapsed (alpha=" << alpha << ") at iteration " << iter
               << "; min pivot " << min_pivot << ", pivot ratio "
               << (min_pivot > 0 ? max_pivot / min_pivot : std::numeric_limits<double>::infinity())
               << "; ";
          sol.diagnostics = diag.str();
          finish_with_best(sol);
          return sol;
        }
      } else {
        stall = 0;
      }

      if (settings_.verbose)
        std::fprintf(stderr, "        alpha_aff %9.2e  sigma %9.2e  alpha %9.2e  mu %9.2e\n",
                     alpha_aff, sigma, alpha, mu);

      x += alpha * dx;
      y += alpha * dy;
      z += alpha * dz;
      s += alpha * ds;
      tau += alpha * dtau;
      kappa += alpha * dkappa;

      if (!x.allFinite() || !s.allFinite() || !z.allFinite() || !std::isfinite(tau)) {
        diag << "non-finite iterate at iteration " << iter << "; ";
        sol.diagnostics = diag.str();
        finish_with_best(sol);
        return sol;
      }
    }

    sol.status = SolveStatus::max_iterations;
    diag << "iteration limit reached; ";
    sol.diagnostics = diag.str();
    finish_with_best(sol);
    return sol;
  }
};

inline ConicSolution solve(const ConicProgram& prog, SolverSettings settings = {}) {
  ConicSolver solver(settings);
  return solver.solve(prog);
}

}  // namespace smpc
