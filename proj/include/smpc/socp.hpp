#pragma once

// Assembly of the soft-constrained SOCP solved at every sampling instant:
// objective data (b, S1, S2, nu, Lambda in factored form), input-duality rows,
// Cantelli-tightened state rows with exact-penalty slacks, and the epigraph
// cone for the quadratic objective.  Only the vector b and the mean-row right
// hand sides depend on the measured state, so one assembled program is reused
// across solves via set_state.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "smpc/chance.hpp"
#include "smpc/conic.hpp"
#include "smpc/horizon.hpp"
#include "smpc/rng.hpp"
#include "smpc/saturation.hpp"
#include "smpc/system.hpp"

namespace smpc {

// ------------------------------------------------------------------ helpers
namespace detail {

// Factor W with W W' = Q for PSD Q (eigendecomposition, tolerant of zero
// eigenvalues).  Throws if Q is indefinite beyond tolerance.
inline Eigen::MatrixXd psd_sqrt_factor(const Eigen::MatrixXd& Q, double tol = 1e-10) {
  if (Q.rows() != Q.cols()) throw std::runtime_error("psd factor: matrix must be square");
  if (Q.rows() == 0) return Q;
  const Eigen::MatrixXd Qs = 0.5 * (Q + Q.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Qs);
  const double lmax = std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
  Eigen::VectorXd lam = es.eigenvalues();
  for (Eigen::Index i = 0; i < lam.size(); ++i) {
    if (lam[i] < -tol * lmax) throw std::runtime_error("psd factor: matrix is indefinite");
    lam[i] = std::sqrt(std::max(lam[i], 0.0));
  }
  return es.eigenvectors() * lam.asDiagonal();
}

inline Eigen::MatrixXd kronecker(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B) {
  Eigen::MatrixXd K(A.rows() * B.rows(), A.cols() * B.cols());
  for (Eigen::Index i = 0; i < A.rows(); ++i)
    for (Eigen::Index j = 0; j < A.cols(); ++j)
      K.block(i * B.rows(), j * B.cols(), B.rows(), B.cols()) = A(i, j) * B;
  return K;
}

}  // namespace detail

// ------------------------------------------------------------- quad_to_soc
// Conversion of x'Qx + b'x + c <= 0 into the cone
//   || [(1 + b'x + c)/2 ; R x] ||_2 <= (1 - b'x - c)/2,   R'R = Q,
// degenerating to the linear row b'x + c <= 0 when Q vanishes.
struct QuadConeBlock {
  bool linear = false;
  Eigen::MatrixXd R;  // zero rows dropped; empty when linear
  Eigen::VectorXd b;
  double c = 0.0;

  bool contains(const Eigen::VectorXd& x, double tol = 1e-9) const {
    const double lin = b.dot(x) + c;
    if (linear) return lin <= tol;
    Eigen::VectorXd head(1 + R.rows());
    head[0] = 0.5 * (1.0 + lin);
    head.tail(R.rows()) = R * x;
    return head.norm() <= 0.5 * (1.0 - lin) + tol;
  }
};

inline QuadConeBlock quad_to_soc(const Eigen::MatrixXd& Qm, const Eigen::VectorXd& b, double c,
                                 double tol = 1e-12) {
  if (Qm.rows() != b.size()) throw std::runtime_error("quad_to_soc: dimension mismatch");
  QuadConeBlock blk;
  blk.b = b;
  blk.c = c;
  const Eigen::MatrixXd W = detail::psd_sqrt_factor(Qm);
  // Keep rows of R = W' with nonnegligible magnitude.
  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = 0; i < W.cols(); ++i)
    if (W.col(i).cwiseAbs().maxCoeff() > tol) keep.push_back(i);
  if (keep.empty()) {
    blk.linear = true;
    return blk;
  }
  blk.R.resize(static_cast<Eigen::Index>(keep.size()), Qm.cols());
  for (size_t i = 0; i < keep.size(); ++i) blk.R.row(static_cast<Eigen::Index>(i)) = W.col(keep[i]).transpose();
  return blk;
}

// ------------------------------------------------------------ decision layout
struct DecisionLayout {
  int N = 0;
  Eigen::Index nx = 0, nu = 0, nw = 0;
  Eigen::Index s_rows = 0;  // input polytope rows per stage
  Eigen::Index r_rows = 0;  // state polytope rows per stage
  bool nominal = false;

  Eigen::Index nv = 0;      // n_u N
  Eigen::Index nm = 0;      // structural entries of vec(M)
  Eigen::Index a_rows = 0;  // 2 n_x N rows of H_w
  Eigen::Index p_cols = 0;  // s N columns of Z
  Eigen::Index nz = 0;      // a_rows * p_cols
  Eigen::Index n_eps = 0;   // r N per slack family

  Eigen::Index v_off = 0, m_off = 0, z_off = 0, em_off = 0, ev_off = 0, g_off = 0, total = 0;

  std::vector<Eigen::Index> m_col_start;  // per column of M, cumulative structural count

  bool m_structural(Eigen::Index row, Eigen::Index col) const {
    return row / nu > col / nx;
  }
  Eigen::Index m_index(Eigen::Index row, Eigen::Index col) const {
    const Eigen::Index sj = col / nx;
    if (!m_structural(row, col)) throw std::runtime_error("m_index: entry outside the causal pattern");
    return m_off + m_col_start[static_cast<size_t>(col)] + (row - (sj + 1) * nu);
  }
  Eigen::Index z_index(Eigen::Index row, Eigen::Index col) const {
    return z_off + col * a_rows + row;
  }
  Eigen::Index em_index(Eigen::Index t) const { return em_off + t; }
  Eigen::Index ev_index(Eigen::Index t) const { return ev_off + t; }
};

// --------------------------------------------------------------- problem data
// Static coefficient data of the program (everything except b and the mean-row
// right hand sides, which depend on the measured state).  Lambda = Omega1 (x) S1
// is kept in the factored pair (S1, Omega1); materializing the Kronecker
// product is never needed.
struct SmpcProblemData {
  Eigen::MatrixXd S1;       // B'QB + R
  Eigen::MatrixXd S2;      // 2 (DG)'QB
  Eigen::MatrixXd nu_mat;  // S2' Omega2' laid out like M; nu = vec restricted to the pattern
  Eigen::MatrixXd q_all;   // row t: q_{i,j}' = 2 (H DG Omega2')
  Eigen::VectorXd c_all;   // row t: H DG Sw (DG)' H' - alpha delta^2/(1-alpha)
  double rho = 0.0;

  Eigen::MatrixXd BtQA2;   // 2 B'QA, gives b(x) = BtQA2 x
  Eigen::MatrixXd HxB;     // state-row mean coefficients on v
  Eigen::MatrixXd HxA;     // state-row dependence on the measured state
  Eigen::VectorXd kx_minus_delta;

  Eigen::MatrixXd omega1, omega2;
  Eigen::MatrixXd L_s1;    // lower Cholesky-like factor, L_s1 L_s1' = S1
  Eigen::MatrixXd W_o1;    // W_o1 W_o1' = Omega1
};

inline SmpcProblemData build_problem_data(const HorizonOperators& ops,
                                          const SaturationMoments& moments,
                                          const ChanceSpec& chance, double rho) {
  SmpcProblemData d;
  d.rho = rho;
  const Eigen::MatrixXd QB = ops.bigQ * ops.bigB;
  d.S1 = ops.bigB.transpose() * QB + ops.bigR;
  const Eigen::MatrixXd DG = ops.bigD * ops.bigG;
  d.S2 = 2.0 * DG.transpose() * QB;
  d.BtQA2 = 2.0 * ops.bigB.transpose() * (ops.bigQ * ops.bigA);
  d.omega1 = moments.omega1;
  d.omega2 = moments.omega2;
  d.nu_mat = d.S2.transpose() * d.omega2.transpose();
  d.L_s1 = detail::psd_sqrt_factor(d.S1);
  d.W_o1 = detail::psd_sqrt_factor(d.omega1);

  const Eigen::Index rN = ops.HX.rows();
  if (static_cast<Eigen::Index>(chance.rows.size()) != rN)
    throw std::runtime_error("chance spec rows do not match the stacked state selectors");
  d.HxB = ops.HX * ops.bigB;
  d.HxA = ops.HX * ops.bigA;
  const Eigen::MatrixXd HxDG = ops.HX * DG;
  d.q_all = 2.0 * HxDG * d.omega2.transpose();
  d.c_all.resize(rN);
  d.kx_minus_delta.resize(rN);
  for (Eigen::Index t = 0; t < rN; ++t) {
    const ChanceRow& row = chance.rows[static_cast<size_t>(t)];
    d.c_all[t] = HxDG.row(t) * ops.bigSw * HxDG.row(t).transpose() - row.variance_cap;
    d.kx_minus_delta[t] = ops.state_rows[static_cast<size_t>(t)].kx - row.delta;
  }
  return d;
}

// ------------------------------------------------------- input-duality LP
// For a fixed feedback row c' = (H_u M)_l the exact tightening of Lemma 1 is
//   min k_w' z   s.t.  H_w' z = c,  z >= 0,
// whose optimum equals max_{w in W} c' w.  Used by oracle tests.
inline ConicProgram build_duality_bound_program(const Polytope& W, const Eigen::RowVectorXd& c_row) {
  if (W.dim() != c_row.size()) throw std::runtime_error("duality program: dimension mismatch");
  const Eigen::Index a = W.rows();
  ConicBuilder bld(a);
  for (Eigen::Index i = 0; i < a; ++i) bld.add_objective(i, W.k[i]);
  for (Eigen::Index j = 0; j < W.dim(); ++j) {
    std::vector<std::pair<Eigen::Index, double>> terms;
    for (Eigen::Index i = 0; i < a; ++i)
      if (W.H(i, j) != 0.0) terms.emplace_back(i, W.H(i, j));
    bld.add_eq_row(terms, c_row[j]);
  }
  for (Eigen::Index i = 0; i < a; ++i) bld.add_lp_row({{i, -1.0}}, 0.0);
  return bld.finish();
}

// ----------------------------------------------------------------- assembler
class SmpcSocp {
 public:
  struct Options {
    bool nominal = false;      // M = 0, zero moments, zero backoff, no variance rows
    bool hard_slacks = false;  // pin every slack to zero (hard-constrained variant)
  };

  struct Policy {
    Eigen::VectorXd v;
    Eigen::MatrixXd M;
    Eigen::MatrixXd Z;
    Eigen::VectorXd eps_m, eps_v;
    double g = 0.0;
  };

  SmpcSocp(const HorizonOperators& ops, const SaturationMoments& moments, const ChanceSpec& chance,
           const SaturationPolicy& policy, double rho)
      : SmpcSocp(ops, moments, chance, policy, rho, Options{}) {}

  SmpcSocp(const HorizonOperators& ops, const SaturationMoments& moments, const ChanceSpec& chance,
           const SaturationPolicy& policy, double rho, Options opt)
      : opt_(opt), phi_max_(policy.phi_max) {
    if (opt_.nominal) {
      SaturationMoments zero;
      zero.omega1 = Eigen::MatrixXd::Zero(moments.omega1.rows(), moments.omega1.cols());
      zero.omega2 = Eigen::MatrixXd::Zero(moments.omega2.rows(), moments.omega2.cols());
      zero.meta.method = "nominal-zero";
      ChanceSpec flat = chance;
      for (auto& r : flat.rows) {
        r.delta = 0.0;
        r.variance_cap = 0.0;
      }
      data_ = build_problem_data(ops, zero, flat, rho);
    } else {
      data_ = build_problem_data(ops, moments, chance, rho);
    }
    init_layout(ops);
    build_static_program(ops);
    x_ = Eigen::VectorXd::Zero(layout_.nx);
    set_state(x_);
  }

  const ConicProgram& program() const { return program_; }
  const DecisionLayout& layout() const { return layout_; }
  const SmpcProblemData& data() const { return data_; }
  const Eigen::VectorXd& state() const { return x_; }

  // Only the objective coefficients on v and the mean-row right-hand sides
  // change with the measured state.
  void set_state(const Eigen::VectorXd& x) {
    if (x.size() != layout_.nx) throw std::runtime_error("set_state: dimension mismatch");
    x_ = x;
    const Eigen::VectorXd b = data_.BtQA2 * x;
    program_.c.segment(layout_.v_off, layout_.nv) = b;
    const Eigen::VectorXd rhs = data_.kx_minus_delta - data_.HxA * x;
    for (Eigen::Index t = 0; t < layout_.n_eps; ++t) program_.h[mean_row_begin_ + t] = rhs[t];
  }

  Policy unpack(const Eigen::VectorXd& sol) const {
    if (sol.size() != layout_.total) throw std::runtime_error("unpack: dimension mismatch");
    Policy p;
    p.v = sol.segment(layout_.v_off, layout_.nv);
    p.M = Eigen::MatrixXd::Zero(layout_.nv, layout_.nx * layout_.N);
    if (!opt_.nominal)
      for (Eigen::Index j = 0; j < p.M.cols(); ++j)
        for (Eigen::Index l = (j / layout_.nx + 1) * layout_.nu; l < layout_.nv; ++l)
          p.M(l, j) = sol[layout_.m_index(l, j)];
    if (layout_.nz > 0) {
      p.Z.resize(layout_.a_rows, layout_.p_cols);
      for (Eigen::Index col = 0; col < layout_.p_cols; ++col)
        p.Z.col(col) = sol.segment(layout_.z_index(0, col), layout_.a_rows);
    }
    p.eps_m = sol.segment(layout_.em_off, layout_.n_eps);
    if (!opt_.nominal) p.eps_v = sol.segment(layout_.ev_off, layout_.n_eps);
    p.g = sol[layout_.g_off];
    return p;
  }

  // Closed-form objective b'v + v'S1v + nu'm + tr(M'S1 M Omega1) + rho 1'eps,
  // used to confirm the epigraph reformulation is tight at the optimum.
  double closed_objective(const Policy& p) const {
    double val = (data_.BtQA2 * x_).dot(p.v) + p.v.dot(data_.S1 * p.v);
    val += data_.rho * p.eps_m.sum();
    if (!opt_.nominal) {
      val += data_.rho * p.eps_v.sum();
      val += (data_.nu_mat.cwiseProduct(p.M)).sum();
      val += (data_.S1 * p.M * data_.omega1 * p.M.transpose()).trace();
    }
    return val;
  }

  // The softening guarantee: (M, v, Z, eps) = (0, 0, 0, eps~) is feasible for
  // every state.  Returns that point in layout order.
  Eigen::VectorXd feasible_point() const {
    Eigen::VectorXd sol = Eigen::VectorXd::Zero(layout_.total);
    const Eigen::VectorXd rhs = data_.kx_minus_delta - data_.HxA * x_;
    for (Eigen::Index t = 0; t < layout_.n_eps; ++t) {
      sol[layout_.em_index(t)] = std::max(0.0, -rhs[t]);
      if (!opt_.nominal) sol[layout_.ev_index(t)] = std::max(0.0, data_.c_all[t]);
    }
    return sol;
  }

  // Worst violation of the assembled program at a candidate point (equality
  // residual, LP rows, cone rows); certifies feasibility of feasible_point().
  double point_violation(const Eigen::VectorXd& sol) const {
    double worst = (program_.A * sol - program_.b).cwiseAbs().maxCoeff();
    const Eigen::VectorXd s = program_.h - program_.G * sol;
    for (Eigen::Index i = 0; i < program_.num_lp; ++i) worst = std::max(worst, -s[i]);
    Eigen::Index at = program_.num_lp;
    for (Eigen::Index q : program_.soc_dims) {
      worst = std::max(worst, s.segment(at + 1, q - 1).norm() - s[at]);
      at += q;
    }
    return worst;
  }

 private:
  void init_layout(const HorizonOperators& ops) {
    DecisionLayout& L = layout_;
    L.N = ops.N;
    L.nx = ops.nx;
    L.nu = ops.nu;
    L.nw = ops.nw;
    L.nominal = opt_.nominal;
    L.s_rows = ops.bigHu.rows() / ops.N;
    L.r_rows = ops.N > 0 ? ops.HX.rows() / ops.N : 0;
    L.nv = ops.nu * ops.N;
    L.n_eps = ops.HX.rows();

    const Eigen::Index d = ops.nx * ops.N;
    L.m_col_start.assign(static_cast<size_t>(d) + 1, 0);
    if (!opt_.nominal) {
      Eigen::Index acc = 0;
      for (Eigen::Index j = 0; j < d; ++j) {
        L.m_col_start[static_cast<size_t>(j)] = acc;
        acc += ops.nu * (ops.N - 1 - j / ops.nx);
      }
      L.m_col_start[static_cast<size_t>(d)] = acc;
      L.nm = acc;
      L.a_rows = 2 * d;
      L.p_cols = L.s_rows * ops.N;
      L.nz = L.a_rows * L.p_cols;
    }

    L.v_off = 0;
    L.m_off = L.nv;
    L.z_off = L.m_off + L.nm;
    L.em_off = L.z_off + L.nz;
    L.ev_off = L.em_off + L.n_eps;
    L.g_off = L.ev_off + (opt_.nominal ? 0 : L.n_eps);
    L.total = L.g_off + 1;
  }

  void build_static_program(const HorizonOperators& ops) {
    const DecisionLayout& L = layout_;
    ConicBuilder bld(L.total);
    using Terms = std::vector<std::pair<Eigen::Index, double>>;

    // Objective: b'v (state-dependent, filled by set_state) + nu'm + rho 1'eps + g.
    if (!opt_.nominal)
      for (Eigen::Index j = 0; j < L.nx * L.N; ++j)
        for (Eigen::Index l = (j / L.nx + 1) * L.nu; l < L.nv; ++l)
          bld.add_objective(L.m_index(l, j), data_.nu_mat(l, j));
    for (Eigen::Index t = 0; t < L.n_eps; ++t) {
      bld.add_objective(L.em_index(t), data_.rho);
      if (!opt_.nominal) bld.add_objective(L.ev_index(t), data_.rho);
    }
    bld.add_objective(L.g_off, 1.0);

    const Eigen::Index d = L.nx * L.N;

    // Duality equalities Z' H_w = H_u M with H_w = [I; -I]:
    // Z+(j,l) - Z-(j,l) = (H_u M)_{l j} for every column l and box row j.
    if (!opt_.nominal) {
      for (Eigen::Index l = 0; l < L.p_cols; ++l) {
        const Eigen::Index stage_l = l / L.s_rows;
        for (Eigen::Index j = 0; j < d; ++j) {
          Terms terms;
          terms.emplace_back(L.z_index(j, l), 1.0);
          terms.emplace_back(L.z_index(d + j, l), -1.0);
          if (j / L.nx < stage_l) {
            for (Eigen::Index q = 0; q < L.nu; ++q) {
              const double hu = ops.bigHu(l, stage_l * L.nu + q);
              if (hu != 0.0) terms.emplace_back(L.m_index(stage_l * L.nu + q, j), -hu);
            }
          }
          bld.add_eq_row(terms, 0.0);
        }
      }
    }

    // Hard-constrained variant used by penalty calibration: slacks pinned to
    // zero, so the program may legitimately be infeasible at some states.
    if (opt_.hard_slacks) {
      for (Eigen::Index t = 0; t < L.n_eps; ++t) {
        bld.add_eq_row({{L.em_index(t), 1.0}}, 0.0);
        if (!opt_.nominal) bld.add_eq_row({{L.ev_index(t), 1.0}}, 0.0);
      }
    }

    // (e) H_u v + Z' k_w <= k_u.
    for (Eigen::Index l = 0; l < ops.bigHu.rows(); ++l) {
      Terms terms;
      for (Eigen::Index q = 0; q < L.nv; ++q)
        if (ops.bigHu(l, q) != 0.0) terms.emplace_back(L.v_off + q, ops.bigHu(l, q));
      if (!opt_.nominal)
        for (Eigen::Index row = 0; row < L.a_rows; ++row)
          terms.emplace_back(L.z_index(row, l), phi_max_);
      bld.add_lp_row(terms, ops.bigku[l]);
    }

    // (g) Z >= 0.
    for (Eigen::Index idx = 0; idx < L.nz; ++idx)
      bld.add_lp_row({{L.z_off + idx, -1.0}}, 0.0);

    // (h) mean rows: H'A x + H'B v <= k_x - delta + eps_m (rhs filled by set_state).
    mean_row_begin_ = -1;
    for (Eigen::Index t = 0; t < L.n_eps; ++t) {
      Terms terms;
      for (Eigen::Index q = 0; q < L.nv; ++q)
        if (data_.HxB(t, q) != 0.0) terms.emplace_back(L.v_off + q, data_.HxB(t, q));
      terms.emplace_back(L.em_index(t), -1.0);
      const Eigen::Index row = bld.add_lp_row(terms, 0.0);
      if (mean_row_begin_ < 0) mean_row_begin_ = row;
    }

    // (k), (l) slack nonnegativity.
    for (Eigen::Index t = 0; t < L.n_eps; ++t) bld.add_lp_row({{L.em_index(t), -1.0}}, 0.0);
    if (!opt_.nominal)
      for (Eigen::Index t = 0; t < L.n_eps; ++t) bld.add_lp_row({{L.ev_index(t), -1.0}}, 0.0);

    // (i)-(j) variance rows via the SOC conversion; the quadratic is
    //   y' Omega1 y + q_{i,j}' y + c_{i,j} - eps_v <= 0,  y = M'(H B)'.
    // Stage-1 rows have no structural y support and degenerate to linear rows.
    struct PendingCone {
      Terms bound;
      double bound_rhs;
      std::vector<Terms> vec_rows;
      std::vector<double> vec_rhs;
    };
    std::vector<PendingCone> cones;
    if (!opt_.nominal) {
      for (Eigen::Index t = 0; t < L.n_eps; ++t) {
        // Affine part s(x) = q'y + c - eps_v; y_j = sum_l (H B)_l m_{l j}.
        Terms lin;
        lin.emplace_back(L.ev_index(t), -1.0);
        for (Eigen::Index j = 0; j < d; ++j) {
          if (data_.q_all(t, j) == 0.0) continue;
          for (Eigen::Index l = (j / L.nx + 1) * L.nu; l < L.nv; ++l) {
            const double hb = data_.HxB(t, l);
            if (hb != 0.0) lin.emplace_back(L.m_index(l, j), data_.q_all(t, j) * hb);
          }
        }
        const double cc = data_.c_all[t];

        // Rows of W_o1' y, composed with the affine map from m to y.
        std::vector<Terms> rows;
        std::vector<double> rows_rhs;
        for (Eigen::Index r = 0; r < data_.W_o1.cols(); ++r) {
          Terms row;
          for (Eigen::Index j = 0; j < d; ++j) {
            const double w = data_.W_o1(j, r);
            if (w == 0.0) continue;
            for (Eigen::Index l = (j / L.nx + 1) * L.nu; l < L.nv; ++l) {
              const double hb = data_.HxB(t, l);
              if (hb != 0.0) row.emplace_back(L.m_index(l, j), w * hb);
            }
          }
          if (!row.empty()) {
            rows.push_back(std::move(row));
            rows_rhs.push_back(0.0);
          }
        }

        if (rows.empty()) {
          // Degenerate linear row c - eps_v <= 0.
          Terms neg;
          for (auto& [idx, v] : lin) neg.emplace_back(idx, v);
          bld.add_lp_row(neg, -cc);
          continue;
        }
        PendingCone pc;
        // Bound row (1 - s)/2 with s = lin + c: h = (1 - c)/2, G = lin/2.
        pc.bound_rhs = 0.5 * (1.0 - cc);
        for (auto& [idx, v] : lin) pc.bound.emplace_back(idx, 0.5 * v);
        // First vector row (1 + s)/2: h = (1 + c)/2, G = -lin/2.
        Terms first;
        for (auto& [idx, v] : lin) first.emplace_back(idx, -0.5 * v);
        pc.vec_rows.push_back(std::move(first));
        pc.vec_rhs.push_back(0.5 * (1.0 + cc));
        for (size_t r = 0; r < rows.size(); ++r) {
          Terms neg;
          for (auto& [idx, v] : rows[r]) neg.emplace_back(idx, -v);
          pc.vec_rows.push_back(std::move(neg));
          pc.vec_rhs.push_back(rows_rhs[r]);
        }
        cones.push_back(std::move(pc));
      }
    }

    // Epigraph cone v'S1 v + m'Lambda m <= g, with the Kronecker quadratic
    // realized as the Frobenius norm of L_s1' M W_o1.
    {
      PendingCone pc;
      pc.bound_rhs = 0.5;
      pc.bound.emplace_back(L.g_off, -0.5);
      Terms first;
      first.emplace_back(L.g_off, 0.5);
      pc.vec_rows.push_back(std::move(first));
      pc.vec_rhs.push_back(0.5);
      // L_s1' v rows.
      for (Eigen::Index r = 0; r < L.nv; ++r) {
        Terms row;
        for (Eigen::Index q = 0; q < L.nv; ++q) {
          const double v = data_.L_s1(q, r);
          if (v != 0.0) row.emplace_back(L.v_off + q, -v);
        }
        if (!row.empty()) {
          pc.vec_rows.push_back(std::move(row));
          pc.vec_rhs.push_back(0.0);
        }
      }
      // (L_s1' M W_o1)_{p q} rows over the structural pattern.
      if (!opt_.nominal) {
        for (Eigen::Index p = 0; p < L.nv; ++p) {
          for (Eigen::Index q = 0; q < d; ++q) {
            Terms row;
            for (Eigen::Index j = 0; j < d; ++j) {
              const double w = data_.W_o1(j, q);
              if (w == 0.0) continue;
              for (Eigen::Index l = (j / L.nx + 1) * L.nu; l < L.nv; ++l) {
                const double ls = data_.L_s1(l, p);
                if (ls != 0.0) row.emplace_back(L.m_index(l, j), -ls * w);
              }
            }
            if (!row.empty()) {
              pc.vec_rows.push_back(std::move(row));
              pc.vec_rhs.push_back(0.0);
            }
          }
        }
      }
      cones.push_back(std::move(pc));
    }

    for (const auto& pc : cones) {
      std::vector<Terms> all_rows;
      std::vector<double> all_rhs;
      all_rows.push_back(pc.bound);
      all_rhs.push_back(pc.bound_rhs);
      for (size_t i = 0; i < pc.vec_rows.size(); ++i) {
        all_rows.push_back(pc.vec_rows[i]);
        all_rhs.push_back(pc.vec_rhs[i]);
      }
      bld.add_soc_block(all_rows, all_rhs);
    }

    program_ = bld.finish();
  }

  Options opt_;
  double phi_max_ = 0.0;
  SmpcProblemData data_;
  DecisionLayout layout_;
  ConicProgram program_;
  Eigen::Index mean_row_begin_ = -1;
  Eigen::VectorXd x_;
};

// -------------------------------------------------------------- cost estimate
struct CostEstimate {
  double closed_form = 0.0;  // without the state-only constant, matching the solved objective
  double c_of_x = 0.0;       // x'A'QA x + tr(Q DG Sw (DG)') — decision independent
  double mc_full = 0.0;      // Monte Carlo estimate of the full expected cost
  double mc_stderr = 0.0;
};

inline CostEstimate cost_estimate(const HorizonOperators& ops, const SmpcProblemData& data,
                                  const LinearStochasticSystem& sys, const SaturationPolicy& policy,
                                  const Eigen::VectorXd& x, const Eigen::MatrixXd& M,
                                  const Eigen::VectorXd& v, std::uint64_t samples,
                                  std::uint64_t seed) {
  CostEstimate est;
  est.closed_form = (data.BtQA2 * x).dot(v) + v.dot(data.S1 * v) +
                    (data.nu_mat.cwiseProduct(M)).sum() +
                    (data.S1 * M * data.omega1 * M.transpose()).trace();
  const Eigen::MatrixXd DG = ops.bigD * ops.bigG;
  est.c_of_x = x.dot(ops.bigA.transpose() * ops.bigQ * ops.bigA * x) +
               (DG.transpose() * ops.bigQ * DG * ops.bigSw).trace();

  Eigen::LLT<Eigen::MatrixXd> llt(sys.disturbance.sigma);
  if (llt.info() != Eigen::Success) throw std::runtime_error("cost estimate: covariance not SPD");
  const Eigen::MatrixXd Lw = llt.matrixL();

  CounterRng rng(seed, 0xc057);
  double sum = 0.0, sumsq = 0.0;
  Eigen::VectorXd w(ops.nw * ops.N), z(ops.nw);
  for (std::uint64_t n = 0; n < samples; ++n) {
    for (int t = 0; t < ops.N; ++t) {
      for (Eigen::Index i = 0; i < ops.nw; ++i) {
        switch (sys.disturbance.family) {
          case DensityFamily::gaussian: z[i] = rng.normal(); break;
          case DensityFamily::uniform: z[i] = rng.uniform_centered(); break;
          case DensityFamily::laplace: z[i] = rng.laplace(); break;
        }
      }
      w.segment(t * ops.nw, ops.nw) = Lw * z;
    }
    const Eigen::VectorXd phi = apply_saturation(policy, ops.bigG * w);
    const Eigen::VectorXd u = M * phi + v;
    const Eigen::VectorXd xs = ops.bigA * x + ops.bigB * u + ops.bigD * (ops.bigG * w);
    const double cost = xs.dot(ops.bigQ * xs) + u.dot(ops.bigR * u);
    sum += cost;
    sumsq += cost * cost;
  }
  const double n = static_cast<double>(samples);
  est.mc_full = sum / n;
  est.mc_stderr = std::sqrt(std::max(0.0, sumsq / n - est.mc_full * est.mc_full) / n);
  return est;
}

}  // namespace smpc
