#include "cdbo/lower.hpp"
#include "cdbo/problems.hpp"
#include "cdbo/rng.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>

using namespace cdbo;

namespace {

Vector v(std::initializer_list<double> xs) {
  Vector out(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) out[i++] = x;
  return out;
}

Vector random_in(rng::Stream& s, const Vector& lo, const Vector& hi) {
  Vector x(lo.size());
  for (Eigen::Index i = 0; i < lo.size(); ++i) x[i] = s.uniform(lo[i], hi[i]);
  return x;
}

LowerSolverConfig recommended(const ProblemLibraryEntry& e) {
  LowerSolverConfig c;
  c.method = e.lower.method == "cubic_newton" ? LowerMethod::cubic_newton : LowerMethod::gradient_descent;
  c.eta = e.lower.eta > 0 ? e.lower.eta : 0.01;
  c.M = e.lower.M > 0 ? e.lower.M : 1.0;
  c.K = e.lower.K;
  return c;
}

}  // namespace

TEST(Minimax, ValuesAtSimplePoints) {
  const auto p = builtin_minimax();
  EXPECT_EQ(p.f(v({0.0}), v({0.0})), 0.0);
  EXPECT_NEAR(p.f(v({1.0}), v({0.0})), 0.841471, 1e-6);
  EXPECT_EQ(p.g(v({1.0}), v({0.3})), -p.f(v({1.0}), v({0.3})));
  const double h = 1e-5;
  const double fd = (p.g(v({1.0}), v({h})) - p.g(v({1.0}), v({-h}))) / (2 * h);
  EXPECT_NEAR(p.grad_y_g(v({1.0}), v({0.0}))[0], fd, 1e-6);
  EXPECT_EQ(p.n, 1);
  EXPECT_EQ(p.m, 1);
  EXPECT_EQ(p.feasible_set.bbox().first[0], -3.0);
  EXPECT_EQ(p.feasible_set.bbox().second[0], 3.0);
}

TEST(Minimax, GradientFieldMatchesObjective) {
  const auto p = builtin_minimax();
  rng::Stream s(9, rng::Domain::test, 0, 0);
  for (int i = 0; i < 50; ++i) {
    const double x = s.uniform(-3, 3), y = s.uniform(-3, 3), h = 1e-6;
    const auto [fx, fy] = minimax_gradient(x, y);
    EXPECT_NEAR(fx, (p.f(v({x + h}), v({y})) - p.f(v({x - h}), v({y}))) / (2 * h), 1e-6 * (1 + std::abs(fx)));
    EXPECT_NEAR(fy, (p.f(v({x}), v({y + h})) - p.f(v({x}), v({y - h}))) / (2 * h), 1e-6 * (1 + std::abs(fy)));
  }
}

TEST(DoubleWell, Values) {
  const auto p = builtin_shifted_double_well();
  EXPECT_EQ(p.g(v({0.0}), v({1.0})), -1.0);
  EXPECT_EQ(p.g(v({0.5}), v({1.5})), -1.0);
  EXPECT_EQ(p.f(v({0.3}), v({0.7})), 0.7);
  EXPECT_EQ(p.y0[0], 0.0);
}

TEST(DoubleWell, ShiftStructureIsExact) {
  const auto p = builtin_shifted_double_well();
  rng::Stream s(1, rng::Domain::test, 0, 0);
  for (int i = 0; i < 100; ++i) {
    const double x = s.uniform(-2, 2), y = s.uniform(-4, 4);
    EXPECT_EQ(p.g(v({x}), v({y})), p.g(v({0.0}), v({y - x})));
  }
}

TEST(FoldFamily, Values) {
  const auto p = builtin_fold_family();
  EXPECT_EQ(p.g(v({0.5, 0.0}), v({0.0})), 0.0);
  EXPECT_EQ(p.y0[0], 0.1);
  EXPECT_EQ(p.n, 2);
  // Interior roots of dg/dy at x1 = 0.75.
  const double r = std::sqrt((2 * 0.75 - 1) / (9 * 0.75 - 6 * 0.75 * 0.75));
  EXPECT_NEAR(r, 0.385, 1e-3);
  EXPECT_NEAR(p.grad_y_g(v({0.75, 0.2}), v({r}))[0], 0.0, 1e-12);
  EXPECT_NEAR(p.grad_y_g(v({0.75, -0.4}), v({-r}))[0], 0.0, 1e-12);
}

TEST(QuarticFamily, CoefficientStructure) {
  const auto p = builtin_quartic_family();
  rng::Stream s(2, rng::Domain::test, 0, 0);
  for (int i = 0; i < 20; ++i) {
    const double a = s.uniform(-4, 5), b = s.uniform(-4, 5);
    const double A = a * a - 5 * a * b + 2 * b * b - 7 * a + 8 * b - 30;
    const double B = a * a - 3 * a * b + 4 * b * b - 5 * a + 2 * b - 40;
    EXPECT_NEAR(p.grad_y_g(v({a, b}), v({0.0}))[0], A, 1e-12 * (1 + std::abs(A)));
    EXPECT_NEAR(p.hess_yy_g(v({a, b}), v({0.0}))(0, 0), 2 * B, 1e-12 * (1 + std::abs(B)));
  }
}

TEST(Builtins, DerivativesMatchFiniteDifferences) {
  for (const auto& e : problem_library()) {
    const auto& p = e.problem;
    const auto [lo, hi] = p.feasible_set.bbox();
    rng::Stream s(4, rng::Domain::test, 1, 0);
    for (int i = 0; i < 100; ++i) {
      const Vector x = random_in(s, lo, hi);
      const Vector y = Vector::Constant(1, s.uniform(e.y_window.first, e.y_window.second));
      const double h1 = 1e-5, h2 = 1e-4;
      const Vector yp = y.array() + h1, ym = y.array() - h1;
      const double fd_grad = (p.g(x, yp) - p.g(x, ym)) / (2 * h1);
      const double an_grad = p.grad_y_g(x, y)[0];
      EXPECT_LE(std::abs(fd_grad - an_grad), 1e-4 * (1 + std::abs(an_grad))) << e.name;
      const Vector yp2 = y.array() + h2, ym2 = y.array() - h2;
      const double fd_hess = (p.grad_y_g(x, yp2)[0] - p.grad_y_g(x, ym2)[0]) / (2 * h2);
      const double an_hess = p.hess_yy_g(x, y)(0, 0);
      EXPECT_LE(std::abs(fd_hess - an_hess), 1e-4 * (1 + std::abs(an_hess))) << e.name;
      // Cross partials against differences in x.
      const Matrix cross = p.grad_x_grad_y_g(x, y);
      for (Eigen::Index j = 0; j < p.n; ++j) {
        Vector xp = x, xm = x;
        const double hx = 1e-5 * (1 + std::abs(x[j]));
        xp[j] += hx;
        xm[j] -= hx;
        const double fd = (p.grad_y_g(xp, y)[0] - p.grad_y_g(xm, y)[0]) / (2 * hx);
        EXPECT_LE(std::abs(fd - cross(0, j)), 1e-4 * (1 + std::abs(cross(0, j)))) << e.name;
      }
    }
  }
}

TEST(Builtins, HessianSymmetricAndFinite) {
  for (const auto& e : problem_library()) {
    const auto [lo, hi] = e.problem.feasible_set.bbox();
    rng::Stream s(5, rng::Domain::test, 0, 0);
    for (int i = 0; i < 50; ++i) {
      const Vector x = random_in(s, lo, hi);
      const Vector y = Vector::Constant(1, s.uniform(e.y_window.first, e.y_window.second));
      const Matrix h = e.problem.hess_yy_g(x, y);
      EXPECT_TRUE(h.allFinite());
      EXPECT_LE((h - h.transpose()).cwiseAbs().maxCoeff(), 1e-10 * (1 + h.cwiseAbs().maxCoeff()));
    }
  }
}

TEST(Builtins, CapBoundsReachableValues) {
  // |f| stays below f_bar along recommended lower-level runs from y0, and on
  // the sublevel set {g <= g(x, y0)} wherever that set is bounded.
  for (const auto& e : problem_library()) {
    const auto& p = e.problem;
    const auto [lo, hi] = p.feasible_set.bbox();
    rng::Stream s(6, rng::Domain::test, 0, 0);
    auto lower = recommended(e);
    for (int i = 0; i < 40; ++i) {
      BilevelProblem q = p;
      const Vector x = random_in(s, lo, hi);
      if (e.name == "minimax") q.y0 = Vector::Constant(1, s.uniform(-2, 2));
      const auto r = solve_lower(q, x, lower);
      for (const auto& y : r.iterates) ASSERT_LE(std::abs(q.f(x, y)), p.f_bar) << e.name;
      if (e.name == "double-well" || e.name == "quartic") {
        const double g0 = p.g(x, p.y0);
        for (int k = 0; k < 200; ++k) {
          const Vector y = Vector::Constant(1, s.uniform(e.y_window.first, e.y_window.second));
          if (p.g(x, y) <= g0) {
            ASSERT_LE(std::abs(p.f(x, y)), p.f_bar) << e.name;
          }
        }
      }
    }
  }
}

TEST(Library, NamesAreUniqueAndFindable) {
  const auto lib = problem_library();
  std::set<std::string> names;
  for (const auto& e : lib) {
    names.insert(e.name);
    EXPECT_NO_THROW(e.problem.validate());
    EXPECT_EQ(&find_problem(lib, e.name), &e);
  }
  EXPECT_EQ(names.size(), lib.size());
  EXPECT_THROW(find_problem(lib, "nope"), InputError);
}

TEST(FeasibleSet, BoxBallCustomInvariants) {
  std::vector<FeasibleSet> sets;
  sets.push_back(FeasibleSet::box(v({-1.0, 0.0}), v({2.0, 0.5})));
  sets.push_back(FeasibleSet::ball(v({0.5, -0.5}), 1.5));
  sets.push_back(FeasibleSet::custom(
      [](const Vector& z) { return Vector(z.cwiseMax(-1.0).cwiseMin(1.0)); },
      [](const Vector& z) { return (z.array().abs() <= 1.0).all(); }, v({-1.0, -1.0}), v({1.0, 1.0})));
  rng::Stream s(7, rng::Domain::test, 0, 0);
  for (const auto& set : sets) {
    const auto [lo, hi] = set.bbox();
    for (int i = 0; i < 200; ++i) {
      const Vector z = random_in(s, Vector(lo.array() - 3.0), Vector(hi.array() + 3.0));
      const Vector p = set.project(z);
      EXPECT_TRUE(set.contains(p)) << set.kind_name();
      EXPECT_LE((set.project(p) - p).norm(), 1e-12) << set.kind_name();
      for (int k = 0; k < 20; ++k) {
        const Vector w = set.project(random_in(s, lo, hi));
        EXPECT_LE((p - z).norm(), (w - z).norm() + 1e-12) << set.kind_name();
      }
    }
  }
  EXPECT_THROW(FeasibleSet::ball(v({0.0}), 0.0), InputError);
  EXPECT_THROW(FeasibleSet::box(v({1.0}), v({0.0})), InputError);
}

TEST(PerturbLinear, IdentityShiftAndComposition) {
  const auto p = builtin_fold_family();
  rng::Stream s(8, rng::Domain::test, 0, 0);
  const auto zero = perturb_linear(p, v({0.0}));
  const auto pa = perturb_linear(p, v({0.3}));
  const auto pab = perturb_linear(pa, v({-0.7}));
  const auto sum = perturb_linear(p, v({0.3 - 0.7}));
  for (int i = 0; i < 10; ++i) {
    const Vector x = v({s.uniform(0, 1), s.uniform(-1, 1)});
    const Vector y = v({s.uniform(-1, 1)});
    EXPECT_EQ(zero.g(x, y), p.g(x, y));
    EXPECT_EQ(pa.hess_yy_g(x, y)(0, 0), p.hess_yy_g(x, y)(0, 0));
    EXPECT_NEAR(pa.grad_y_g(x, y)[0] - p.grad_y_g(x, y)[0], 0.3, 1e-12);
    EXPECT_NEAR(pab.g(x, y), sum.g(x, y), 1e-12);
    EXPECT_NEAR(pab.grad_y_g(x, y)[0], sum.grad_y_g(x, y)[0], 1e-12);
  }
  EXPECT_THROW(perturb_linear(p, v({1.0, 2.0})), InputError);
}
