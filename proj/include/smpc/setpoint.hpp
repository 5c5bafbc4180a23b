#pragma once

// Piecewise-constant setpoint schedules realized by coordinate shifting.  The
// regulation program always runs in deviation variables about a steady pair
// (x_ss, u_ss); tracking a product-concentration target means computing the
// steady pair whose tracked outputs come closest to the target (least squares
// through the DC gain), then shifting the constraint polytopes accordingly.
// A schedule is a list of segments with sample-index switch times.

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "smpc/system.hpp"

namespace smpc {

// One constant-setpoint interval.  Shifts are deviations from the plant's
// linearization point, so the pre-step segment is typically all zeros.
struct SetpointSegment {
  int start_step = 0;       // first sample index where this segment is active
  Eigen::VectorXd x_shift;  // steady state, deviation coordinates
  Eigen::VectorXd u_shift;  // steady input, deviation coordinates
};

struct SetpointSchedule {
  std::vector<SetpointSegment> segments;  // ordered by start_step, first at 0

  int segment_index(int t) const {
    int idx = 0;
    for (size_t i = 0; i < segments.size(); ++i)
      if (segments[i].start_step <= t) idx = static_cast<int>(i);
    return idx;
  }
  const SetpointSegment& at_step(int t) const {
    return segments[static_cast<size_t>(segment_index(t))];
  }
};

// Steady input deviation whose DC response best matches the target deviation
// of the tracked outputs: minimize || sel((I-A)^{-1} B du) - dr ||_2 over du.
// The corresponding state shift (I-A)^{-1} B du then satisfies the
// steady-state relation exactly by construction.
inline SetpointSegment steady_pair_for_targets(const LinearStochasticSystem& sys,
                                               const std::vector<Eigen::Index>& tracked,
                                               const Eigen::VectorXd& target_deviation,
                                               int start_step) {
  if (static_cast<Eigen::Index>(tracked.size()) != target_deviation.size())
    throw std::runtime_error("setpoint: tracked index/target length mismatch");
  const Eigen::Index nx = sys.nx();
  for (Eigen::Index i : tracked)
    if (i < 0 || i >= nx) throw std::runtime_error("setpoint: tracked state index out of range");

  const Eigen::MatrixXd gain =
      (Eigen::MatrixXd::Identity(nx, nx) - sys.A).lu().solve(sys.B);  // DC gain, states per input
  Eigen::MatrixXd sel(static_cast<Eigen::Index>(tracked.size()), sys.nu());
  for (size_t r = 0; r < tracked.size(); ++r) sel.row(static_cast<Eigen::Index>(r)) = gain.row(tracked[r]);

  SetpointSegment seg;
  seg.start_step = start_step;
  seg.u_shift = sel.completeOrthogonalDecomposition().solve(target_deviation);
  seg.x_shift = gain * seg.u_shift;
  return seg;
}

// Shifted polytope right-hand sides for a segment: rows keep their normals,
// the right sides absorb the steady offset.
inline Polytope shift_polytope(const Polytope& P, const Eigen::VectorXd& shift) {
  Polytope out = P;
  out.k = P.k - P.H * shift;
  return out;
}

// Schedule validation: ordered switch times, exact steady-state consistency,
// and strict interiority of the shifted input origin (Assumption 1 requires
// the origin inside the input set in every segment's coordinates).
inline void validate_schedule(const LinearStochasticSystem& sys, const Polytope& U,
                              const SetpointSchedule& sched, double tol = 1e-8) {
  if (sched.segments.empty()) throw std::runtime_error("setpoint: empty schedule");
  if (sched.segments.front().start_step != 0)
    throw std::runtime_error("setpoint: first segment must start at step 0");
  for (size_t i = 0; i + 1 < sched.segments.size(); ++i)
    if (sched.segments[i].start_step >= sched.segments[i + 1].start_step)
      throw std::runtime_error("setpoint: segment switch times must be strictly increasing");

  for (size_t i = 0; i < sched.segments.size(); ++i) {
    const auto& seg = sched.segments[i];
    if (seg.x_shift.size() != sys.nx() || seg.u_shift.size() != sys.nu())
      throw std::runtime_error("setpoint: segment shift dimensions do not match the plant");
    const Eigen::VectorXd resid =
        seg.x_shift - sys.A * seg.x_shift - sys.B * seg.u_shift;
    const double scale = 1.0 + seg.x_shift.cwiseAbs().maxCoeff();
    if (resid.cwiseAbs().maxCoeff() > tol * scale)
      throw std::runtime_error("setpoint: segment " + std::to_string(i) +
                               " violates the steady-state relation");
    const Eigen::VectorXd margin = U.k - U.H * seg.u_shift;
    if (margin.minCoeff() <= 0.0)
      throw std::runtime_error("setpoint: segment " + std::to_string(i) +
                               " steady input is not interior to the input set");
  }
}

}  // namespace smpc
