#pragma once

// Stacked prediction operators over a horizon of length N.
//
// With xt the state at the sampling instant and u, w the stacked inputs and
// disturbances over stages 0..N-1, the predicted states (stages 0..N) obey
//
//   xstack = bigA * xt + bigB * u + bigD * bigG * w
//
// where bigA stacks the powers of A, bigD is block lower triangular with
// identity diagonal blocks, bigB = bigD (I_N (x) B), and bigG = I_N (x) G.

#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "smpc/system.hpp"

namespace smpc {

struct StateRowSelector {
  int stage = 0;       // i in 1..N (predicted stage the row constrains)
  int row = 0;         // j, row index into the per-stage state polytope
  double kx = 0.0;     // right side of the original row
};

struct HorizonOperators {
  int N = 0;
  Eigen::Index nx = 0, nu = 0, nw = 0;

  Eigen::MatrixXd bigA;   // (N+1)nx x nx
  Eigen::MatrixXd bigD;   // (N+1)nx x N nx
  Eigen::MatrixXd bigB;   // (N+1)nx x N nu
  Eigen::MatrixXd bigG;   // N nx x N nw
  Eigen::MatrixXd bigQ;   // (N+1)nx square, N+1 identical Q blocks
  Eigen::MatrixXd bigR;   // N nu square
  Eigen::MatrixXd bigSw;  // N nw square, stacked disturbance covariance

  Eigen::MatrixXd bigHu;  // sN x nu N, block-diagonal input polytope
  Eigen::VectorXd bigku;  // sN

  // One row per (stage i, state-constraint row j), i major. HX.row(r)
  // applied to the stacked state vector evaluates H_{x,j} x_i.
  Eigen::MatrixXd HX;     // rN x (N+1)nx
  std::vector<StateRowSelector> state_rows;
};

inline HorizonOperators build_horizon_operators(const LinearStochasticSystem& sys,
                                                const Polytope& U, const Polytope& X,
                                                const WeightSpec& weights, int N) {
  if (N < 1) throw std::runtime_error("empty horizon: N must be at least 1");

  HorizonOperators ops;
  ops.N = N;
  ops.nx = sys.nx();
  ops.nu = sys.nu();
  ops.nw = sys.nw();
  const Eigen::Index nx = ops.nx, nu = ops.nu, nw = ops.nw;

  ops.bigA.resize((N + 1) * nx, nx);
  Eigen::MatrixXd Apow = Eigen::MatrixXd::Identity(nx, nx);
  ops.bigA.topRows(nx) = Apow;
  for (int i = 1; i <= N; ++i) {
    Apow = sys.A * Apow;
    ops.bigA.middleRows(i * nx, nx) = Apow;
  }

  ops.bigD = Eigen::MatrixXd::Zero((N + 1) * nx, N * nx);
  for (int i = 1; i <= N; ++i)
    for (int j = 0; j < i; ++j)
      ops.bigD.block(i * nx, j * nx, nx, nx) = ops.bigA.middleRows((i - j - 1) * nx, nx);

  ops.bigB = Eigen::MatrixXd::Zero((N + 1) * nx, N * nu);
  for (int j = 0; j < N; ++j)
    ops.bigB.middleCols(j * nu, nu) = ops.bigD.middleCols(j * nx, nx) * sys.B;

  ops.bigG = Eigen::MatrixXd::Zero(N * nx, N * nw);
  ops.bigSw = Eigen::MatrixXd::Zero(N * nw, N * nw);
  for (int t = 0; t < N; ++t) {
    ops.bigG.block(t * nx, t * nw, nx, nw) = sys.G;
    ops.bigSw.block(t * nw, t * nw, nw, nw) = sys.disturbance.sigma;
  }

  ops.bigQ = Eigen::MatrixXd::Zero((N + 1) * nx, (N + 1) * nx);
  for (int t = 0; t <= N; ++t) ops.bigQ.block(t * nx, t * nx, nx, nx) = weights.Q;
  ops.bigR = Eigen::MatrixXd::Zero(N * nu, N * nu);
  for (int t = 0; t < N; ++t) ops.bigR.block(t * nu, t * nu, nu, nu) = weights.R;

  const Eigen::Index s = U.rows();
  ops.bigHu = Eigen::MatrixXd::Zero(s * N, nu * N);
  ops.bigku.resize(s * N);
  for (int t = 0; t < N; ++t) {
    ops.bigHu.block(t * s, t * nu, s, nu) = U.H;
    ops.bigku.segment(t * s, s) = U.k;
  }

  const Eigen::Index r = X.rows();
  ops.HX = Eigen::MatrixXd::Zero(r * N, (N + 1) * nx);
  ops.state_rows.reserve(static_cast<size_t>(r) * N);
  for (int i = 1; i <= N; ++i) {
    for (Eigen::Index j = 0; j < r; ++j) {
      const Eigen::Index row = (i - 1) * r + j;
      ops.HX.block(row, i * nx, 1, nx) = X.H.row(j);
      ops.state_rows.push_back({i, static_cast<int>(j), X.k[j]});
    }
  }
  return ops;
}

}  // namespace smpc
