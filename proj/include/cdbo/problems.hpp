#pragma once

#include "cdbo/core.hpp"

#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace cdbo {

/// Convex compact set with membership, Euclidean projection and a bounding box.
class FeasibleSet {
 public:
  struct Box {
    Vector lo, hi;
  };
  struct Ball {
    Vector center;
    double radius;
  };
  struct Custom {
    std::function<Vector(const Vector&)> project;
    std::function<bool(const Vector&)> contains;
    Vector lo, hi;
  };

  static FeasibleSet box(Vector lo, Vector hi) {
    require(lo.size() == hi.size() && lo.size() > 0, "box: bounds must have equal positive size");
    require((lo.array() <= hi.array()).all(), "box: lo must not exceed hi");
    return FeasibleSet(Box{std::move(lo), std::move(hi)});
  }
  static FeasibleSet box(double lo, double hi, Eigen::Index n) {
    return box(Vector::Constant(n, lo), Vector::Constant(n, hi));
  }
  static FeasibleSet ball(Vector center, double radius) {
    require(radius > 0.0, "ball: radius must be positive");
    require(center.size() > 0, "ball: empty center");
    return FeasibleSet(Ball{std::move(center), radius});
  }
  static FeasibleSet custom(std::function<Vector(const Vector&)> project,
                            std::function<bool(const Vector&)> contains, Vector lo, Vector hi) {
    require(project && contains, "custom set: both oracles required");
    require(lo.size() == hi.size() && lo.size() > 0, "custom set: bad bounding box");
    return FeasibleSet(Custom{std::move(project), std::move(contains), std::move(lo), std::move(hi)});
  }

  Eigen::Index dim() const { return bbox().first.size(); }

  bool contains(const Vector& z) const {
    if (z.size() != dim()) return false;
    return std::visit(
        [&](const auto& s) -> bool {
          using T = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<T, Box>) {
            return (z.array() >= s.lo.array()).all() && (z.array() <= s.hi.array()).all();
          } else if constexpr (std::is_same_v<T, Ball>) {
            // Relative slack absorbs the rounding of the radial projection.
            return (z - s.center).norm() <= s.radius * (1.0 + 1e-12);
          } else {
            return s.contains(z);
          }
        },
        kind_);
  }

  Vector project(const Vector& z) const {
    require(z.size() == dim(), "project: dimension mismatch");
    return std::visit(
        [&](const auto& s) -> Vector {
          using T = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<T, Box>) {
            return z.cwiseMax(s.lo).cwiseMin(s.hi);
          } else if constexpr (std::is_same_v<T, Ball>) {
            const Vector d = z - s.center;
            const double r = d.norm();
            if (r <= s.radius) return z;
            return s.center + (s.radius / r) * d;
          } else {
            return s.project(z);
          }
        },
        kind_);
  }

  std::pair<Vector, Vector> bbox() const {
    return std::visit(
        [](const auto& s) -> std::pair<Vector, Vector> {
          using T = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<T, Ball>) {
            return {s.center.array() - s.radius, s.center.array() + s.radius};
          } else {
            return {s.lo, s.hi};
          }
        },
        kind_);
  }

  std::string kind_name() const {
    switch (kind_.index()) {
      case 0: return "box";
      case 1: return "ball";
      default: return "custom";
    }
  }

 private:
  using Kind = std::variant<Box, Ball, Custom>;
  explicit FeasibleSet(Kind k) : kind_(std::move(k)) {}
  Kind kind_;
};

using ScalarOracle = std::function<double(const Vector& x, const Vector& y)>;
using VectorOracle = std::function<Vector(const Vector& x, const Vector& y)>;
using MatrixOracle = std::function<Matrix(const Vector& x, const Vector& y)>;

/// Oracle bundle for min_x f(x, y(x)) where y(x) is produced by running a
/// lower-level method on g(x, .) from y0. Oracles must be pure: the bundle is
/// shared across threads.
struct BilevelProblem {
  std::string name;
  Eigen::Index n = 0;
  Eigen::Index m = 0;
  ScalarOracle f;
  ScalarOracle g;
  VectorOracle grad_y_g;
  MatrixOracle hess_yy_g;
  /// m x n cross partials d/dx (grad_y g). Optional; finite-differenced if absent.
  MatrixOracle grad_x_grad_y_g;
  Vector y0;
  /// Cap on |f| over the reachable region. Also the value assigned to
  /// smoothing samples that leave the feasible set.
  double f_bar = 0.0;
  FeasibleSet feasible_set = FeasibleSet::box(0.0, 1.0, 1);

  void validate() const {
    require(n > 0 && m > 0, name + ": dimensions must be positive");
    require(f && g && grad_y_g && hess_yy_g, name + ": missing oracle");
    require(y0.size() == m, name + ": y0 has wrong size");
    require(feasible_set.dim() == n, name + ": feasible set has wrong dimension");
    require(f_bar >= 0.0 && std::isfinite(f_bar), name + ": f_bar must be finite and >= 0");
  }

  /// Cross partials, analytic when available, else central differences of grad_y_g.
  Matrix cross_partials(const Vector& x, const Vector& y, double step = 1e-6) const {
    if (grad_x_grad_y_g) return grad_x_grad_y_g(x, y);
    Matrix out(m, n);
    Vector xp = x, xm = x;
    for (Eigen::Index j = 0; j < n; ++j) {
      const double h = step * (1.0 + std::abs(x[j]));
      xp[j] = x[j] + h;
      xm[j] = x[j] - h;
      out.col(j) = (grad_y_g(xp, y) - grad_y_g(xm, y)) / (2.0 * h);
      xp[j] = xm[j] = x[j];
    }
    return out;
  }
};

/// g~(x, y) = g(x, y) + a^T y. Hessian unchanged, gradient shifted by a.
inline BilevelProblem perturb_linear(const BilevelProblem& problem, const Vector& a) {
  if (a.size() != problem.m) {
    throw InputError("perturb_linear: perturbation has size " + std::to_string(a.size()) +
                     ", expected m = " + std::to_string(problem.m));
  }
  BilevelProblem out = problem;
  out.name = problem.name + "+linear";
  out.g = [g = problem.g, a](const Vector& x, const Vector& y) { return g(x, y) + a.dot(y); };
  out.grad_y_g = [grad = problem.grad_y_g, a](const Vector& x, const Vector& y) -> Vector {
    return grad(x, y) + a;
  };
  return out;
}

/// Lower-level method recommended for a builtin, stored as plain fields so
/// this header stays independent of the solver module.
struct RecommendedLower {
  std::string method;  // "gradient_descent" | "cubic_newton"
  double eta = 0.0;
  double M = 0.0;
  int K = 1;
};

struct ProblemLibraryEntry {
  std::string name;
  BilevelProblem problem;
  std::string notes;
  RecommendedLower lower;
  /// Upper bound on the y-Lipschitz constant of hess_yy_g over the level set
  /// {g(x, .) <= g(x, y0)}, x feasible. Valid choice of M for descent.
  double hessian_lipschitz = 0.0;
  /// y-window that contains every stationary point of interest (scanner range).
  std::pair<double, double> y_window{-1.0, 1.0};
};

namespace detail {
inline Vector v1(double a) { return Vector::Constant(1, a); }
inline Matrix m1(double a) { return Matrix::Constant(1, 1, a); }
}  // namespace detail

/// min_x max_y (x^2 - y^2) sin(x + y) + x y sin(x - y), posed as a bilevel
/// problem with g = -f.
inline BilevelProblem builtin_minimax() {
  BilevelProblem p;
  p.name = "minimax";
  p.n = 1;
  p.m = 1;
  p.f = [](const Vector& xv, const Vector& yv) {
    const double x = xv[0], y = yv[0];
    return (x * x - y * y) * std::sin(x + y) + x * y * std::sin(x - y);
  };
  p.g = [f = p.f](const Vector& x, const Vector& y) { return -f(x, y); };
  p.grad_y_g = [](const Vector& xv, const Vector& yv) {
    const double x = xv[0], y = yv[0];
    const double fy = -2.0 * y * std::sin(x + y) + (x * x - y * y) * std::cos(x + y) +
                      x * std::sin(x - y) - x * y * std::cos(x - y);
    return detail::v1(-fy);
  };
  p.hess_yy_g = [](const Vector& xv, const Vector& yv) {
    const double x = xv[0], y = yv[0];
    const double fyy = -2.0 * std::sin(x + y) - 4.0 * y * std::cos(x + y) -
                       (x * x - y * y) * std::sin(x + y) - 2.0 * x * std::cos(x - y) -
                       x * y * std::sin(x - y);
    return detail::m1(-fyy);
  };
  p.grad_x_grad_y_g = [](const Vector& xv, const Vector& yv) {
    const double x = xv[0], y = yv[0];
    const double fxy = 2.0 * (x - y) * std::cos(x + y) - (x * x - y * y) * std::sin(x + y) +
                       std::sin(x - y) + (x - y) * std::cos(x - y) + x * y * std::sin(x - y);
    return detail::m1(-fxy);
  };
  p.y0 = detail::v1(0.0);
  // 1.5 x max|f| along gradient-descent paths (eta = 0.01, K = 200) started
  // from y0 in [-2, 2], x on a 400-point grid of [-3, 3]; max|f| = 34.53.
  p.f_bar = 52.0;
  p.feasible_set = FeasibleSet::box(-3.0, 3.0, 1);
  return p;
}

/// Gradient field (df/dx, df/dy) of the minimax objective, for descent-ascent.
inline std::pair<double, double> minimax_gradient(double x, double y) {
  const double s_p = std::sin(x + y), c_p = std::cos(x + y);
  const double s_m = std::sin(x - y), c_m = std::cos(x - y);
  const double fx = 2.0 * x * s_p + (x * x - y * y) * c_p + y * s_m + x * y * c_m;
  const double fy = -2.0 * y * s_p + (x * x - y * y) * c_p + x * s_m - x * y * c_m;
  return {fx, fy};
}

/// g(x, y) = (y - x)^4 - 2 (y - x)^2 with f(x, y) = y. The response of a
/// descent method started at y0 = 0 jumps between y = x - 1 and y = x + 1 as x
/// crosses 0, where it stalls on the maximizer.
inline BilevelProblem builtin_shifted_double_well() {
  BilevelProblem p;
  p.name = "double-well";
  p.n = 1;
  p.m = 1;
  p.f = [](const Vector&, const Vector& y) { return y[0]; };
  p.g = [](const Vector& x, const Vector& y) {
    const double w = y[0] - x[0];
    const double w2 = w * w;
    return w2 * w2 - 2.0 * w2;
  };
  p.grad_y_g = [](const Vector& x, const Vector& y) {
    const double w = y[0] - x[0];
    return detail::v1(4.0 * w * (w * w - 1.0));
  };
  p.hess_yy_g = [](const Vector& x, const Vector& y) {
    const double w = y[0] - x[0];
    return detail::m1(12.0 * w * w - 4.0);
  };
  p.grad_x_grad_y_g = [](const Vector& x, const Vector& y) {
    const double w = y[0] - x[0];
    return detail::m1(-(12.0 * w * w - 4.0));
  };
  p.y0 = detail::v1(0.0);
  // Level set {g(x, .) <= g(x, 0)} over x in [-2, 2] reaches |y| = 4.
  p.f_bar = 6.0;
  p.feasible_set = FeasibleSet::box(-2.0, 2.0, 1);
  return p;
}

/// g(x, y) = (1 - 2 x1) y + (3 x1 - 2 x1^2) y^3, f(x, y) = x1 + y. Two
/// stationary points are born at y = 0 when x1 crosses 1/2 (a fold).
inline BilevelProblem builtin_fold_family() {
  BilevelProblem p;
  p.name = "fold";
  p.n = 2;
  p.m = 1;
  p.f = [](const Vector& x, const Vector& y) { return x[0] + y[0]; };
  p.g = [](const Vector& x, const Vector& y) {
    const double a = 1.0 - 2.0 * x[0], c = 3.0 * x[0] - 2.0 * x[0] * x[0];
    return a * y[0] + c * y[0] * y[0] * y[0];
  };
  p.grad_y_g = [](const Vector& x, const Vector& y) {
    const double a = 1.0 - 2.0 * x[0], c = 3.0 * x[0] - 2.0 * x[0] * x[0];
    return detail::v1(a + 3.0 * c * y[0] * y[0]);
  };
  p.hess_yy_g = [](const Vector& x, const Vector& y) {
    const double c = 3.0 * x[0] - 2.0 * x[0] * x[0];
    return detail::m1(6.0 * c * y[0]);
  };
  p.grad_x_grad_y_g = [](const Vector& x, const Vector& y) {
    Matrix out(1, 2);
    out(0, 0) = -2.0 + 3.0 * (3.0 - 4.0 * x[0]) * y[0] * y[0];
    out(0, 1) = 0.0;
    return out;
  };
  p.y0 = detail::v1(0.1);
  // g is unbounded below in y for x1 < 1/2, so the cap is taken over the
  // reachable set of the recommended solver (GD, eta = 0.01, K = 100):
  // max|f| = 1.553 on a 20 x 20 grid of the box.
  p.f_bar = 2.4;
  Vector lo(2), hi(2);
  lo << 0.0, -1.0;
  hi << 1.0, 1.0;
  p.feasible_set = FeasibleSet::box(lo, hi);
  return p;
}

/// g(x, y) = y^4 + A(x) y^3 + B(x) y^2 + A(x) y with quadratic A, B over [-4, 5]^2.
inline BilevelProblem builtin_quartic_family() {
  struct Coef {
    static double A(const Vector& x) {
      const double a = x[0], b = x[1];
      return a * a - 5.0 * a * b + 2.0 * b * b - 7.0 * a + 8.0 * b - 30.0;
    }
    static double B(const Vector& x) {
      const double a = x[0], b = x[1];
      return a * a - 3.0 * a * b + 4.0 * b * b - 5.0 * a + 2.0 * b - 40.0;
    }
  };
  BilevelProblem p;
  p.name = "quartic";
  p.n = 2;
  p.m = 1;
  p.f = [](const Vector& x, const Vector& y) { return x[0] + y[0]; };
  p.g = [](const Vector& x, const Vector& yv) {
    const double y = yv[0], A = Coef::A(x), B = Coef::B(x);
    return ((y + A) * y + B) * y * y + A * y;
  };
  p.grad_y_g = [](const Vector& x, const Vector& yv) {
    const double y = yv[0], A = Coef::A(x), B = Coef::B(x);
    return detail::v1(((4.0 * y + 3.0 * A) * y + 2.0 * B) * y + A);
  };
  p.hess_yy_g = [](const Vector& x, const Vector& yv) {
    const double y = yv[0], A = Coef::A(x), B = Coef::B(x);
    return detail::m1((12.0 * y + 6.0 * A) * y + 2.0 * B);
  };
  p.grad_x_grad_y_g = [](const Vector& x, const Vector& yv) {
    const double a = x[0], b = x[1], y = yv[0];
    const double dA1 = 2.0 * a - 5.0 * b - 7.0, dA2 = -5.0 * a + 4.0 * b + 8.0;
    const double dB1 = 2.0 * a - 3.0 * b - 5.0, dB2 = -3.0 * a + 8.0 * b + 2.0;
    Matrix out(1, 2);
    out(0, 0) = 3.0 * dA1 * y * y + 2.0 * dB1 * y + dA1;
    out(0, 1) = 3.0 * dA2 * y * y + 2.0 * dB2 * y + dA2;
    return out;
  };
  p.y0 = detail::v1(0.0);
  // Level set {g <= g(x, 0) = 0} over a 20 x 20 grid of the box: max|x1 + y| = 207.2.
  p.f_bar = 312.0;
  p.feasible_set = FeasibleSet::box(-4.0, 5.0, 2);
  return p;
}

inline std::vector<ProblemLibraryEntry> problem_library() {
  std::vector<ProblemLibraryEntry> lib;
  lib.push_back({"minimax", builtin_minimax(),
                 "nonconvex-nonconcave game; lower level maximizes f in y by gradient descent on -f",
                 {"gradient_descent", 0.01, 0.0, 200}, 60.0, {-6.0, 6.0}});
  lib.push_back({"double-well", builtin_shifted_double_well(),
                 "shifted double well; the response jumps at x = 0",
                 {"cubic_newton", 0.05, 24.0, 30}, 48.0, {-4.0, 4.0}});
  lib.push_back({"fold", builtin_fold_family(),
                 "fold bifurcation along x1 = 1/2; g is unbounded below for x1 < 1/2",
                 {"gradient_descent", 0.01, 0.0, 100}, 6.75, {-1.0, 1.0}});
  lib.push_back({"quartic", builtin_quartic_family(),
                 "quartic-in-y family with a stratified bifurcation set over [-4, 5]^2",
                 {"cubic_newton", 0.0, 3700.0, 100}, 3700.0, {-160.0, 160.0}});
  return lib;
}

inline const ProblemLibraryEntry& find_problem(const std::vector<ProblemLibraryEntry>& lib,
                                               const std::string& name) {
  for (const auto& e : lib)
    if (e.name == name) return e;
  std::string known;
  for (const auto& e : lib) known += (known.empty() ? "" : ", ") + e.name;
  throw InputError("unknown problem '" + name + "' (known: " + known + ")");
}

}  // namespace cdbo
