#pragma once

#include "cdbo/core.hpp"
#include "cdbo/problems.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <limits>
#include <string>
#include <vector>

namespace cdbo {

enum class LowerMethod { gradient_descent, cubic_newton };

/// Which recorded iterate a solve returns.
enum class Selection {
  automatic,        // last iterate for GD, stationarity measure for cubic Newton
  last,
  stationarity,     // argmin_k max{sqrt(|grad|/M), -2 lambda_min / (3M)}
  min_grad_norm,
};

struct LowerSolverConfig {
  LowerMethod method = LowerMethod::cubic_newton;
  double eta = 0.01;  // gradient descent step
  double M = 1.0;     // cubic regularization
  int K = 1;
  double grad_tol = 0.0;  // early exit when |grad| <= grad_tol; 0 disables
  Selection selection = Selection::automatic;
  /// Keep every iterate. Disabled by the smoothing sampler, which only needs y_hat.
  bool record_iterates = true;

  void validate() const {
    require(K >= 0, "lower.K must be >= 0");
    require(grad_tol >= 0.0, "lower.grad_tol must be >= 0");
    if (method == LowerMethod::gradient_descent) require(eta > 0.0, "lower.eta must be > 0");
    if (method == LowerMethod::cubic_newton) require(M > 0.0, "lower.M must be > 0");
  }
};

inline std::string to_string(LowerMethod m) {
  return m == LowerMethod::gradient_descent ? "gradient_descent" : "cubic_newton";
}

inline std::string to_string(Selection s) {
  switch (s) {
    case Selection::automatic: return "automatic";
    case Selection::last: return "last";
    case Selection::stationarity: return "stationarity";
    case Selection::min_grad_norm: return "min_grad_norm";
  }
  return "automatic";
}

struct LowerSolveResult {
  Vector y_hat;
  std::vector<Vector> iterates;
  std::vector<double> g_values;
  std::vector<double> grad_norms;
  std::vector<double> stationarity_measures;
  std::size_t selected_index = 0;
  OracleCounts oracle_counts;
};

struct CubicStep {
  Vector s;
  double model_value = 0.0;
  /// Root r of the secular equation |s(r)| = r, where (H + (M r / 2) I) s = -grad.
  double boundary_multiplier = 0.0;
  bool hard_case = false;
};

/// max{ sqrt(|grad| / M), -2 lambda_min / (3 M) }.
inline double stationarity_measure(double grad_norm, double lambda_min, double M) {
  return std::max(std::sqrt(grad_norm / M), -2.0 * lambda_min / (3.0 * M));
}

inline double cubic_model(const Vector& grad, const Matrix& hess, double M, const Vector& s) {
  const double r = s.norm();
  return grad.dot(s) + 0.5 * s.dot(hess * s) + M / 6.0 * r * r * r;
}

namespace detail {

inline void check_symmetric(const Matrix& hess) {
  if (hess.rows() != hess.cols()) throw NumericalError("hessian is not square");
  const double scale = std::max(1.0, hess.cwiseAbs().maxCoeff());
  const double asym = (hess - hess.transpose()).cwiseAbs().maxCoeff();
  if (asym > 1e-8 * scale) {
    throw NumericalError("hessian is not symmetric (max asymmetry " + std::to_string(asym) + ")");
  }
}

}  // namespace detail

/// Global minimizer of grad^T s + 1/2 s^T H s + M/6 |s|^3.
///
/// In the eigenbasis H = Q diag(lambda) Q^T with gamma = Q^T grad, the
/// minimizer is s(mu) = -sum gamma_i / (lambda_i + mu) q_i where the shift
/// mu = M r / 2 satisfies |s(mu)| = r and mu >= max(0, -lambda_min). The
/// scalar equation is solved by Newton steps kept inside a bisection bracket.
/// When gamma vanishes on the lambda_min eigenspace and the remaining
/// components are too short to reach r_min = -2 lambda_min / M, the root sits
/// at mu = -lambda_min and the gap is closed along the first eigenvector of
/// that eigenspace.
inline CubicStep solve_cubic_subproblem(const Vector& grad, const Matrix& hess, double M) {
  if (!(M > 0.0) || !std::isfinite(M)) throw InputError("cubic subproblem: M must be finite and > 0");
  if (!grad.allFinite() || !hess.allFinite())
    throw NumericalError("cubic subproblem: non-finite gradient or hessian");
  if (hess.rows() != grad.size()) throw InputError("cubic subproblem: dimension mismatch");
  detail::check_symmetric(hess);

  const Eigen::Index m = grad.size();
  const Matrix sym = 0.5 * (hess + hess.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> eig(sym);
  if (eig.info() != Eigen::Success) throw NumericalError("cubic subproblem: eigendecomposition failed");
  const Vector& lambda = eig.eigenvalues();  // ascending
  const Matrix& Q = eig.eigenvectors();
  const Vector gamma = Q.transpose() * grad;

  const double lambda_min = lambda[0];
  const double scale = std::max({1.0, lambda.cwiseAbs().maxCoeff(), grad.norm()});
  const double eig_tol = 1e-12 * scale;
  const double gnorm = grad.norm();

  // Components lying in the lambda_min eigenspace.
  Eigen::Index n_min = 0;
  while (n_min < m && lambda[n_min] - lambda_min <= eig_tol) ++n_min;
  double gamma_min_norm = 0.0;
  for (Eigen::Index i = 0; i < n_min; ++i) gamma_min_norm += gamma[i] * gamma[i];
  gamma_min_norm = std::sqrt(gamma_min_norm);

  auto s_of = [&](double mu, Eigen::Index first) {
    Vector coeff = Vector::Zero(m);
    for (Eigen::Index i = first; i < m; ++i) coeff[i] = -gamma[i] / (lambda[i] + mu);
    return coeff;
  };
  // psi(mu) = |s(mu)| - 2 mu / M, strictly decreasing on the admissible range.
  auto psi = [&](double mu, double& dpsi) {
    double n2 = 0.0, d = 0.0;
    for (Eigen::Index i = 0; i < m; ++i) {
      const double den = lambda[i] + mu;
      n2 += gamma[i] * gamma[i] / (den * den);
      d += gamma[i] * gamma[i] / (den * den * den);
    }
    const double nrm = std::sqrt(n2);
    dpsi = (nrm > 0.0 ? -d / nrm : 0.0) - 2.0 / M;
    return nrm - 2.0 * mu / M;
  };

  CubicStep out;
  const double mu_lo = std::max(0.0, -lambda_min);
  const bool degenerate_direction = gamma_min_norm <= 1e-14 * std::max(1.0, gnorm) || gnorm == 0.0;

  if (degenerate_direction && lambda_min <= 0.0) {
    // Candidate hard case: the secular function stays finite at mu_lo.
    const Vector partial = s_of(mu_lo, n_min);
    const double r_min = 2.0 * mu_lo / M;
    const double pn = partial.norm();
    if (pn <= r_min) {
      const double tau = std::sqrt(std::max(0.0, r_min * r_min - pn * pn));
      Vector coeff = partial;
      coeff[0] += tau;
      out.s = Q * coeff;
      out.boundary_multiplier = r_min;
      out.hard_case = tau > 0.0;
      out.model_value = cubic_model(grad, sym, M, out.s);
      return out;
    }
  }

  if (gnorm == 0.0) {
    // Stationary convex model: s = 0.
    out.s = Vector::Zero(m);
    out.model_value = 0.0;
    return out;
  }

  // Bracket [lo, hi] with psi(lo) > 0 >= psi(hi).
  double lo = mu_lo, hi = mu_lo + 1.0;
  double dtmp = 0.0;
  while (psi(hi, dtmp) > 0.0) {
    lo = hi;
    hi = mu_lo + 2.0 * (hi - mu_lo);
    if (!std::isfinite(hi)) throw NumericalError("cubic subproblem: secular bracket diverged");
  }
  double mu = hi;
  for (int it = 0; it < 300; ++it) {
    double dpsi = 0.0;
    const double val = psi(mu, dpsi);
    const double r = 2.0 * mu / M;
    if (std::abs(val) <= 1e-13 * (1.0 + r)) break;
    if (val > 0.0) lo = mu; else hi = mu;
    double next = mu - val / dpsi;
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    if (next == mu || hi - lo <= 4.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, hi)) {
      mu = next;
      break;
    }
    mu = next;
  }
  out.s = Q * s_of(mu, 0);
  out.boundary_multiplier = 2.0 * mu / M;
  out.model_value = cubic_model(grad, sym, M, out.s);
  if (!out.s.allFinite()) throw NumericalError("cubic subproblem: non-finite step");
  return out;
}

namespace detail {

inline double lambda_min_of(const Matrix& h) {
  if (h.rows() == 1) return h(0, 0);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (h + h.transpose()), Eigen::EigenvaluesOnly);
  return eig.eigenvalues()[0];
}

}  // namespace detail

/// Cubic-regularized Newton from problem.y0 for K full steps. Every iterate
/// y_0..y_K is scored; the default selection returns the one with the
/// smallest stationarity measure.
inline LowerSolveResult cubic_newton_solve(const BilevelProblem& problem, const Vector& x,
                                           const LowerSolverConfig& config) {
  if (config.method != LowerMethod::cubic_newton)
    throw InputError("cubic_newton_solve: config.method must be cubic_newton");
  config.validate();
  LowerSolveResult res;
  Vector y = problem.y0;
  Vector best_y = y;
  double best_crit = std::numeric_limits<double>::infinity();
  std::size_t best_k = 0;
  std::size_t last_k = 0;

  const Selection sel = config.selection == Selection::automatic ? Selection::stationarity : config.selection;
  const int K = config.K;
  for (int k = 0;; ++k) {
    const double gval = problem.g(x, y);
    const Vector grad = problem.grad_y_g(x, y);
    const Matrix hess = problem.hess_yy_g(x, y);
    res.oracle_counts.g += 1;
    res.oracle_counts.grad += 1;
    res.oracle_counts.hess += 1;
    if (!std::isfinite(gval) || !grad.allFinite() || !hess.allFinite()) {
      throw NumericalError("cubic newton: non-finite value at iterate " + std::to_string(k));
    }
    const double gn = grad.norm();
    const double nu = stationarity_measure(gn, detail::lambda_min_of(hess), config.M);
    if (config.record_iterates) {
      res.iterates.push_back(y);
      res.g_values.push_back(gval);
      res.grad_norms.push_back(gn);
      res.stationarity_measures.push_back(nu);
    }
    const double score = sel == Selection::min_grad_norm ? gn : nu;
    if (score < best_crit) {  // strict: ties keep the smallest index
      best_crit = score;
      best_y = y;
      best_k = static_cast<std::size_t>(k);
    }
    last_k = static_cast<std::size_t>(k);
    if (k == K || (config.grad_tol > 0.0 && gn <= config.grad_tol)) break;
    const CubicStep step = solve_cubic_subproblem(grad, hess, config.M);
    y = y + step.s;
  }
  if (sel == Selection::last) {
    res.selected_index = last_k;
    res.y_hat = y;
  } else {
    res.selected_index = best_k;
    res.y_hat = best_y;
  }
  return res;
}

/// y_{k+1} = y_k - eta grad_y g(x, y_k), K steps from problem.y0; returns the
/// last iterate unless another selection is configured.
inline LowerSolveResult gradient_descent_solve(const BilevelProblem& problem, const Vector& x,
                                               const LowerSolverConfig& config) {
  if (config.method != LowerMethod::gradient_descent)
    throw InputError("gradient_descent_solve: config.method must be gradient_descent");
  config.validate();
  if (config.selection == Selection::stationarity)
    throw InputError("gradient descent does not evaluate Hessians; stationarity selection unavailable");
  LowerSolveResult res;
  Vector y = problem.y0;
  const bool want_min_grad = config.selection == Selection::min_grad_norm;
  double best = std::numeric_limits<double>::infinity();
  std::size_t best_k = 0;
  Vector best_y = y;
  int k = 0;
  for (; k < config.K; ++k) {
    const Vector grad = problem.grad_y_g(x, y);
    res.oracle_counts.grad += 1;
    if (!grad.allFinite()) throw NumericalError("gradient descent: non-finite gradient at iterate " + std::to_string(k));
    const double gn = grad.norm();
    if (config.record_iterates) {
      res.iterates.push_back(y);
      res.grad_norms.push_back(gn);
    }
    if (want_min_grad && gn < best) {
      best = gn;
      best_k = static_cast<std::size_t>(k);
      best_y = y;
    }
    if (config.grad_tol > 0.0 && gn <= config.grad_tol) break;
    y -= config.eta * grad;
    if (!y.allFinite()) throw NumericalError("gradient descent: non-finite iterate " + std::to_string(k + 1));
  }
  if (config.record_iterates && k == config.K) res.iterates.push_back(y);
  if (want_min_grad && config.K > 0) {
    res.y_hat = best_y;
    res.selected_index = best_k;
  } else {
    res.y_hat = y;
    res.selected_index = static_cast<std::size_t>(k);
  }
  return res;
}

inline LowerSolveResult solve_lower(const BilevelProblem& problem, const Vector& x,
                                    const LowerSolverConfig& config) {
  return config.method == LowerMethod::cubic_newton ? cubic_newton_solve(problem, x, config)
                                                     : gradient_descent_solve(problem, x, config);
}

/// Lower-level oracle calls one solve makes, used for budget accounting.
inline OracleCounts lower_solve_cost(const LowerSolverConfig& config) {
  OracleCounts c;
  if (config.method == LowerMethod::cubic_newton) {
    c.g = c.grad = c.hess = config.K + 1;
  } else {
    c.grad = config.K;
  }
  return c;
}

}  // namespace cdbo
