#pragma once

// Element-wise saturation policies, their second-moment matrices
// Omega1 = E[phi(Gw) phi(Gw)'] and Omega2 = E[phi(Gw) w'], and the polytopic
// support of the saturated disturbance vector.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "smpc/rng.hpp"
#include "smpc/system.hpp"

namespace smpc {

// ---------------------------------------------------------------- policies
enum class SaturationKind { hard_clip, scaled_sigmoid };

struct SaturationPolicy {
  SaturationKind kind = SaturationKind::hard_clip;
  double phi_max = 1.0;

  double operator()(double a) const {
    if (kind == SaturationKind::hard_clip)
      return a > phi_max ? phi_max : (a < -phi_max ? -phi_max : a);
    return phi_max * std::tanh(a / phi_max);
  }
};

inline Eigen::VectorXd apply_saturation(const SaturationPolicy& policy, const Eigen::VectorXd& gw) {
  Eigen::VectorXd out(gw.size());
  for (Eigen::Index i = 0; i < gw.size(); ++i) out[i] = policy(gw[i]);
  return out;
}

// Support of the saturated vector: the infinity-norm box with 2 nx N rows.
inline Polytope saturated_support(const SaturationPolicy& policy, int N, Eigen::Index nx) {
  const Eigen::Index d = N * nx;
  Polytope W;
  W.H.resize(2 * d, d);
  W.H.topRows(d) = Eigen::MatrixXd::Identity(d, d);
  W.H.bottomRows(d) = -Eigen::MatrixXd::Identity(d, d);
  W.k = Eigen::VectorXd::Constant(2 * d, policy.phi_max);
  return W;
}

// ----------------------------------------------------- scalar normal tools
namespace detail {

inline double normal_pdf(double z) { return std::exp(-0.5 * z * z) * 0.39894228040143267794; }
inline double normal_cdf(double z) { return 0.5 * std::erfc(-z * 0.70710678118654752440); }

// Acklam's rational approximation of the standard normal quantile, refined
// with one Halley step; absolute error well below 1e-13 on (0, 1).
inline double normal_quantile(double p) {
  if (p <= 0.0 || p >= 1.0) throw std::runtime_error("normal_quantile requires p in (0,1)");
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                             1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                             6.680131188771972e+01, -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                             -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                             3.754408661907416e+00};
  const double plow = 0.02425;
  double x;
  if (p < plow) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - plow) {
    const double q = p - 0.5, r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log(1.0 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  const double e = normal_cdf(x) - p;
  const double u = e / normal_pdf(x);
  return x - u / (1.0 + 0.5 * x * u);
}

// Gauss-Legendre nodes/weights on [-1, 1] by Newton iteration on P_n.
inline void gauss_legendre(int n, std::vector<double>& nodes, std::vector<double>& weights) {
  nodes.assign(n, 0.0);
  weights.assign(n, 0.0);
  const int half = (n + 1) / 2;
  for (int i = 0; i < half; ++i) {
    double x = std::cos(3.14159265358979323846 * (i + 0.75) / (n + 0.5));
    double dp = 0.0;
    for (int it = 0; it < 100; ++it) {
      double p0 = 1.0, p1 = x;
      for (int k = 2; k <= n; ++k) {
        const double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
      }
      dp = n * (x * p1 - p0) / (x * x - 1.0);
      const double dx = p1 / dp;
      x -= dx;
      if (std::abs(dx) < 1e-15) break;
    }
    nodes[i] = -x;
    nodes[n - 1 - i] = x;
    weights[i] = weights[n - 1 - i] = 2.0 / ((1.0 - x * x) * dp * dp);
  }
}

// Gauss-Hermite rule for the standard normal weight (Golub-Welsch on the
// symmetric tridiagonal Jacobi matrix with off-diagonals sqrt(k)).
inline void gauss_hermite_normal(int n, std::vector<double>& nodes, std::vector<double>& weights) {
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
  for (int k = 1; k < n; ++k) J(k, k - 1) = J(k - 1, k) = std::sqrt(static_cast<double>(k));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
  nodes.resize(n);
  weights.resize(n);
  for (int i = 0; i < n; ++i) {
    nodes[i] = es.eigenvalues()[i];
    const double v = es.eigenvectors()(0, i);
    weights[i] = v * v;
  }
}

// Radical-inverse (van der Corput) in the given base.
inline double radical_inverse(std::uint64_t i, int base) {
  double f = 1.0, r = 0.0;
  while (i > 0) {
    f /= base;
    r += f * static_cast<double>(i % base);
    i /= base;
  }
  return r;
}

inline const int kHaltonBases[] = {2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37};

}  // namespace detail

// Closed-form second moments of the hard clip of a centered normal:
// with z = c / sigma,
//   E[clip(w, c)^2]  = sigma^2 [ (2 Phi(z) - 1) - 2 z pdf(z) + 2 z^2 (1 - Phi(z)) ]
//   E[clip(w, c) w]  = sigma^2 erf(z / sqrt 2)
struct ClipMoments {
  double second;  // E[clip^2]
  double cross;   // E[clip * w]
};

inline ClipMoments hard_clip_normal_moments(double sigma, double c) {
  if (sigma <= 0.0) return {0.0, 0.0};
  const double z = c / sigma;
  const double Phi = detail::normal_cdf(z);
  const double pdf = detail::normal_pdf(z);
  ClipMoments m;
  m.second = sigma * sigma * ((2.0 * Phi - 1.0) - 2.0 * z * pdf + 2.0 * z * z * (1.0 - Phi));
  m.cross = sigma * sigma * std::erf(z * 0.70710678118654752440);
  return m;
}

// ------------------------------------------------------------ moment matrices
enum class MomentMethod { auto_select, analytic, quadrature, quasi_random };

struct MomentMeta {
  std::string method;
  std::uint64_t samples = 0;
  std::uint64_t seed = 0;
  double mean_phi_sup = 0.0;  // ||E[phi]||_inf, should be ~0 for odd phi
};

struct SaturationMoments {
  Eigen::MatrixXd omega1;  // nx N square
  Eigen::MatrixXd omega2;  // nx N x nw N
  MomentMeta meta;
};

namespace detail {

inline bool is_diagonal(const Eigen::MatrixXd& m, double tol = 0.0) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      if (i != j && std::abs(m(i, j)) > tol) return false;
  return true;
}

// One-step blocks by 1-D integration, valid when G and Sigma_w are diagonal
// (each component of Gw then depends on a single independent w component).
inline void blocks_univariate(const SaturationPolicy& policy, const LinearStochasticSystem& sys,
                              bool closed_form, Eigen::MatrixXd& o1, Eigen::MatrixXd& o2,
                              double& mean_sup) {
  const Eigen::Index nx = sys.nx();
  o1 = Eigen::MatrixXd::Zero(nx, nx);
  o2 = Eigen::MatrixXd::Zero(nx, sys.nw());
  mean_sup = 0.0;

  std::vector<double> gl_nodes, gl_weights, gh_nodes, gh_weights;
  if (!closed_form) {
    gauss_legendre(64, gl_nodes, gl_weights);
    gauss_hermite_normal(96, gh_nodes, gh_weights);
  }

  for (Eigen::Index i = 0; i < nx; ++i) {
    const double g = sys.G(i, i);
    const double var_w = sys.disturbance.sigma(i, i);
    const double s = std::abs(g) * std::sqrt(var_w);  // std dev of (Gw)_i
    if (s == 0.0) continue;

    double second = 0.0, cross = 0.0;  // E[phi^2], E[phi * (Gw)_i]
    if (closed_form) {
      const ClipMoments m = hard_clip_normal_moments(s, policy.phi_max);
      second = m.second;
      cross = m.cross;
    } else if (policy.kind == SaturationKind::hard_clip) {
      // Smooth interior on [-c, c] by Gauss-Legendre plus exact tails.
      const double c = policy.phi_max;
      const double zc = c / s;
      for (size_t q = 0; q < gl_nodes.size(); ++q) {
        const double v = c * gl_nodes[q];          // integrand variable in [-c, c]
        const double wq = c * gl_weights[q] * normal_pdf(v / s) / s;
        second += wq * v * v;
        cross += wq * v * v;
      }
      const double tail = 1.0 - normal_cdf(zc);
      second += 2.0 * c * c * tail;
      // E[clip * w] tail: 2 c E[w 1{w > c}] = 2 c s pdf(zc)
      cross += 2.0 * c * s * normal_pdf(zc);
    } else {
      // Smooth sigmoid: Gauss-Hermite in the standardized variable.
      for (size_t q = 0; q < gh_nodes.size(); ++q) {
        const double v = s * gh_nodes[q];
        const double p = policy(v);
        second += gh_weights[q] * p * p;
        cross += gh_weights[q] * p * v;
      }
    }
    o1(i, i) = second;
    // E[phi((Gw)_i) w_i] = E[phi * (Gw)_i] / g
    o2(i, i) = cross / g;
  }
}

// One-step blocks by quasi-random sampling with a fixed seed; handles general
// G and Sigma_w through the Cholesky transform w = L z.
inline void blocks_qmc(const SaturationPolicy& policy, const LinearStochasticSystem& sys,
                       std::uint64_t samples, std::uint64_t seed, Eigen::MatrixXd& o1,
                       Eigen::MatrixXd& o2, double& mean_sup) {
  const Eigen::Index nx = sys.nx(), nw = sys.nw();
  if (nw > static_cast<Eigen::Index>(sizeof(kHaltonBases) / sizeof(int)))
    throw std::runtime_error("quasi-random moment path supports at most 12 disturbance dims");

  Eigen::LLT<Eigen::MatrixXd> llt(sys.disturbance.sigma);
  if (llt.info() != Eigen::Success) throw std::runtime_error("disturbance covariance not SPD");
  const Eigen::MatrixXd L = llt.matrixL();

  // Cranley-Patterson rotation makes the point set depend on the seed while
  // preserving low discrepancy.
  CounterRng rng(seed, 0x9d7);
  Eigen::VectorXd shift(nw);
  for (Eigen::Index d = 0; d < nw; ++d) shift[d] = rng.uniform();

  o1 = Eigen::MatrixXd::Zero(nx, nx);
  o2 = Eigen::MatrixXd::Zero(nx, nw);
  Eigen::VectorXd mean_phi = Eigen::VectorXd::Zero(nx);
  Eigen::VectorXd z(nw);
  for (std::uint64_t n = 0; n < samples; ++n) {
    for (Eigen::Index d = 0; d < nw; ++d) {
      double u = radical_inverse(n + 1, kHaltonBases[d]) + shift[d];
      if (u >= 1.0) u -= 1.0;
      u = std::min(std::max(u, 1e-16), 1.0 - 1e-16);
      switch (sys.disturbance.family) {
        case DensityFamily::gaussian:
          z[d] = normal_quantile(u);
          break;
        case DensityFamily::uniform:
          z[d] = (u - 0.5) * 3.4641016151377545871;
          break;
        case DensityFamily::laplace: {
          const double v = u - 0.5;
          const double sg = v < 0 ? -1.0 : 1.0;
          z[d] = -sg * std::log(1.0 - 2.0 * std::abs(v)) * 0.70710678118654752440;
          break;
        }
      }
    }
    // For non-Gaussian families L z has the right covariance; componentwise
    // shapes are exact only when Sigma_w is diagonal, which validation of the
    // analytic/quadrature paths already assumes for those families.
    const Eigen::VectorXd w = L * z;
    const Eigen::VectorXd p = apply_saturation(policy, sys.G * w);
    o1.noalias() += p * p.transpose();
    o2.noalias() += p * w.transpose();
    mean_phi += p;
  }
  const double inv = 1.0 / static_cast<double>(samples);
  o1 *= inv;
  o2 *= inv;
  mean_sup = (mean_phi * inv).cwiseAbs().maxCoeff();
}

}  // namespace detail

inline SaturationMoments saturation_moments(const SaturationPolicy& policy,
                                            const LinearStochasticSystem& sys, int N,
                                            MomentMethod method = MomentMethod::auto_select,
                                            std::uint64_t samples = 1u << 16,
                                            std::uint64_t seed = 0x5eed) {
  const bool univariate_ok = detail::is_diagonal(sys.G) && detail::is_diagonal(sys.disturbance.sigma);
  const bool gaussian = sys.disturbance.family == DensityFamily::gaussian;

  if (method == MomentMethod::auto_select) {
    method = (policy.kind == SaturationKind::hard_clip && univariate_ok && gaussian)
                 ? MomentMethod::analytic
                 : MomentMethod::quasi_random;
  }

  Eigen::MatrixXd o1, o2;
  MomentMeta meta;
  double mean_sup = 0.0;
  switch (method) {
    case MomentMethod::analytic:
      if (!univariate_ok || !gaussian || policy.kind != SaturationKind::hard_clip)
        throw std::runtime_error(
            "analytic path requires element-wise independence (diagonal G and Sigma_w), "
            "Gaussian disturbances, and the hard-clip policy");
      detail::blocks_univariate(policy, sys, true, o1, o2, mean_sup);
      meta.method = "analytic";
      break;
    case MomentMethod::quadrature:
      if (!univariate_ok || !gaussian)
        throw std::runtime_error(
            "quadrature path requires element-wise independence (diagonal G and Sigma_w) "
            "and Gaussian disturbances");
      detail::blocks_univariate(policy, sys, false, o1, o2, mean_sup);
      meta.method = "quadrature";
      break;
    case MomentMethod::quasi_random:
      detail::blocks_qmc(policy, sys, samples, seed, o1, o2, mean_sup);
      meta.method = "quasi-random";
      meta.samples = samples;
      meta.seed = seed;
      break;
    default:
      throw std::runtime_error("unresolved moment method");
  }

  const double mean_tol = (meta.method == "quasi-random")
                              ? 3.0 / std::sqrt(static_cast<double>(samples))
                              : 1e-6;
  if (mean_sup > mean_tol)
    throw std::runtime_error("saturation moment check failed: |E[phi]| = " + std::to_string(mean_sup));
  meta.mean_phi_sup = mean_sup;

  // Disturbances are i.i.d. across time: compute one block, tile N times.
  SaturationMoments out;
  out.meta = meta;
  const Eigen::Index nx = sys.nx(), nw = sys.nw();
  out.omega1 = Eigen::MatrixXd::Zero(N * nx, N * nx);
  out.omega2 = Eigen::MatrixXd::Zero(N * nx, N * nw);
  for (int t = 0; t < N; ++t) {
    out.omega1.block(t * nx, t * nx, nx, nx) = 0.5 * (o1 + o1.transpose());
    out.omega2.block(t * nx, t * nw, nx, nw) = o2;
  }
  return out;
}

}  // namespace smpc
