#include "cdbo/smoothing.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>

using namespace cdbo;

namespace {

Vector v(std::initializer_list<double> xs) {
  Vector out(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) out[i++] = x;
  return out;
}

double pdf(double t) { return std::exp(-0.5 * t * t) / std::sqrt(2.0 * std::numbers::pi); }

double simpson(const std::function<double(double)>& f, double a, double b, int n) {
  const double h = (b - a) / n;
  double sum = f(a) + f(b);
  for (int i = 1; i < n; ++i) sum += (i % 2 ? 4.0 : 2.0) * f(a + h * i);
  return sum * h / 3.0;
}

/// int phi(x - xi t) pdf(t) dt over t in [-12, 12], split where phi's
/// argument crosses 0 so each piece is smooth.
template <class F>
double smooth_by_quadrature(F phi, double x, double xi) {
  const auto integrand = [&](double t) { return phi(x - xi * t) * pdf(t); };
  const double cut = std::clamp(x / xi, -12.0, 12.0);
  return simpson(integrand, -12.0, cut - 1e-10, 20000) + simpson(integrand, cut + 1e-10, 12.0, 20000);
}

DirectObjective direct(Eigen::Index n, std::function<double(const Vector&)> phi) {
  DirectObjective o;
  o.n = n;
  o.phi = std::move(phi);
  return o;
}

SmoothingConfig smoothing(double xi, std::uint64_t seed = 0, int threads = 1) {
  SmoothingConfig s;
  s.xi = xi;
  s.master_seed = seed;
  s.threads = threads;
  return s;
}

}  // namespace

TEST(SmoothedStep, ClosedFormMatchesQuadrature) {
  for (double xi : {0.05, 0.1, 0.5}) {
    for (double x : {-1.0, -0.5, -0.05, 0.0, 0.03, 0.5, 1.0}) {
      const auto ref = smoothed_step_reference(x, xi);
      EXPECT_NEAR(ref.value, smooth_by_quadrature(step_function, x, xi), 1e-8) << x << " " << xi;
      const double h = 1e-4 * xi;
      const double fd = (smooth_by_quadrature(step_function, x + h, xi) -
                         smooth_by_quadrature(step_function, x - h, xi)) / (2.0 * h);
      EXPECT_NEAR(ref.derivative, fd, 1e-5) << x << " " << xi;
    }
  }
}

TEST(SmoothedStep, FarFieldLimits) {
  EXPECT_NEAR(smoothed_step_reference(5.0, 0.1).value, 1.0, 1e-12);
  EXPECT_NEAR(smoothed_step_reference(-5.0, 0.1).value, 5.0, 1e-12);
  EXPECT_NEAR(smoothed_step_reference(-5.0, 0.1).derivative, -1.0, 1e-12);
  EXPECT_NEAR(smoothed_step_reference(5.0, 0.1).derivative, 0.0, 1e-12);
}

TEST(Kernel, IntegratesToOne) {
  for (double xi : {0.1, 1.0}) {
    const auto k = [xi](double z) { return gaussian_kernel(v({z}), xi); };
    double total = 0.0;
    const int n = 100000;
    const double h = 24.0 * xi / n;
    for (int i = 0; i < n; ++i) total += k(-12.0 * xi + (i + 0.5) * h) * h;
    EXPECT_NEAR(total, 1.0, 1e-10);
  }
  EXPECT_NEAR(gaussian_kernel(Vector::Zero(2), 1.0), 1.0 / (2.0 * std::numbers::pi), 1e-15);
}

TEST(Bounds, SignFunctionAttainsTheGradientBound) {
  const double xi = 0.2;
  const auto sign = [](double z) { return z > 0 ? 1.0 : -1.0; };
  // d/dx of smoothed sign is 2 pdf(x/xi)/xi, maximal at x = 0.
  const double h = 1e-4;
  const double slope0 = (smooth_by_quadrature(sign, h, xi) - smooth_by_quadrature(sign, -h, xi)) / (2 * h);
  EXPECT_NEAR(slope0, gradient_norm_bound(1.0, xi), 1e-5);
  for (double x : {-0.5, -0.1, 0.1, 0.3}) {
    const double s = (smooth_by_quadrature(sign, x + h, xi) - smooth_by_quadrature(sign, x - h, xi)) / (2 * h);
    EXPECT_LE(std::abs(s), gradient_norm_bound(1.0, xi));
    const double curv = (smooth_by_quadrature(sign, x + 10 * h, xi) - 2 * smooth_by_quadrature(sign, x, xi) +
                         smooth_by_quadrature(sign, x - 10 * h, xi)) / (100 * h * h);
    EXPECT_LE(std::abs(curv), lipschitz_bound(1.0, xi));
  }
  EXPECT_THROW(gradient_norm_bound(1.0, 0.0), InputError);
  EXPECT_THROW(lipschitz_bound(-1.0, 1.0), InputError);
}

TEST(Estimator, UnbiasedForLinearObjective) {
  const Vector a = v({1.5, -2.0, 0.25});
  const auto obj = direct(3, [a](const Vector& z) { return a.dot(z) + 3.0; });
  const auto est = estimate_hypergradient(obj, v({0.2, 0.1, -0.4}), 20000, smoothing(0.1, 7), 0);
  for (Eigen::Index i = 0; i < 3; ++i) EXPECT_NEAR(est.value[i], a[i], 4.0 * est.standard_error[i]);
  EXPECT_EQ(est.samples_used, 20000);
  EXPECT_EQ(est.per_sample_f.size(), 20000u);
  EXPECT_EQ(est.oracle_counts.f, 20000);
}

TEST(Estimator, QuadraticGradient) {
  // Smoothing a quadratic leaves its gradient unchanged.
  const auto obj = direct(2, [](const Vector& z) { return z[0] * z[0] + 3.0 * z[0] * z[1]; });
  const Vector x = v({0.5, -1.0});
  const auto est = estimate_hypergradient(obj, x, 50000, smoothing(0.05, 3), 1);
  EXPECT_NEAR(est.value[0], 2 * x[0] + 3 * x[1], 4.0 * est.standard_error[0]);
  EXPECT_NEAR(est.value[1], 3 * x[0], 4.0 * est.standard_error[1]);
}

TEST(Estimator, SmoothedValueOfStep) {
  const auto obj = direct(1, [](const Vector& z) { return step_function(z[0]); });
  for (double x : {-0.5, 0.0, 0.5}) {
    const auto est = estimate_smoothed_value(obj, v({x}), 20000, smoothing(0.1, 11), 2);
    EXPECT_NEAR(est.value, smoothed_step_reference(x, 0.1).value, 4.0 * est.standard_error + 1e-6);
  }
}

TEST(Estimator, DeterministicAndThreadInvariant) {
  const auto p = builtin_shifted_double_well();
  LowerSolverConfig lower;
  lower.M = 24.0;
  lower.K = 30;
  const auto a = estimate_hypergradient(p, v({0.1}), 200, smoothing(0.1, 5, 1), lower, 17);
  const auto b = estimate_hypergradient(p, v({0.1}), 200, smoothing(0.1, 5, 4), lower, 17);
  const auto c = estimate_hypergradient(p, v({0.1}), 200, smoothing(0.1, 5, 1), lower, 18);
  const auto d = estimate_hypergradient(p, v({0.1}), 200, smoothing(0.1, 6, 1), lower, 17);
  EXPECT_EQ(a.value, b.value);
  EXPECT_EQ(a.per_sample_f, b.per_sample_f);
  EXPECT_NE(a.value, c.value);
  EXPECT_NE(a.value, d.value);
}

TEST(Estimator, OracleCountsAndInfeasibleSamples) {
  const auto p = builtin_shifted_double_well();
  LowerSolverConfig lower;
  lower.M = 24.0;
  lower.K = 5;
  const auto [lo, hi] = p.feasible_set.bbox();
  const auto est = estimate_hypergradient(p, hi, 4000, smoothing(0.1, 1), lower, 0);
  // The upper boundary point sends about half the samples outside.
  EXPECT_GT(est.infeasible_count, 1800);
  EXPECT_LT(est.infeasible_count, 2200);
  const int feasible = est.samples_used - est.infeasible_count;
  OracleCounts expected;
  for (int i = 0; i < feasible; ++i) expected += lower_solve_cost(lower);
  expected.f += feasible;
  EXPECT_EQ(est.oracle_counts, expected);
  int at_cap = 0;
  for (double f : est.per_sample_f) at_cap += f == p.f_bar;
  EXPECT_GE(at_cap, est.infeasible_count);
}

TEST(Estimator, SingleSampleHasUnknownError) {
  const auto obj = direct(1, [](const Vector& z) { return z[0]; });
  const auto est = estimate_hypergradient(obj, v({0.0}), 1, smoothing(0.1), 0);
  EXPECT_TRUE(std::isinf(est.standard_error[0]));
}

TEST(Estimator, RejectsBadArguments) {
  const auto obj = direct(1, [](const Vector& z) { return z[0]; });
  EXPECT_THROW(estimate_hypergradient(obj, v({0.0}), 0, smoothing(0.1), 0), InputError);
  EXPECT_THROW(estimate_hypergradient(obj, v({0.0}), 10, smoothing(0.0), 0), InputError);
  EXPECT_THROW(estimate_hypergradient(obj, v({0.0, 1.0}), 10, smoothing(0.1), 0), InputError);
  auto threads = smoothing(0.1);
  threads.threads = 0;
  EXPECT_THROW(estimate_hypergradient(obj, v({0.0}), 10, threads, 0), InputError);
}

TEST(Estimator, FailingSampleIsNamed) {
  const auto obj = direct(1, [](const Vector& z) -> double {
    if (z[0] > 0.15) throw NumericalError("blew up");
    return z[0];
  });
  try {
    estimate_hypergradient(obj, v({0.0}), 1000, smoothing(0.1, 0, 3), 0);
    FAIL() << "expected an error";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("sample "), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("blew up"), std::string::npos);
  }
}

TEST(Estimator, ConstantObjectiveWithMatchingCap) {
  const double c = 2.5;
  auto obj = direct(2, [c](const Vector&) { return c; });
  obj.feasible_set = FeasibleSet::box(-1.0, 1.0, 2);
  obj.f_bar = c;
  const int N = 100000;
  const auto est = estimate_hypergradient(obj, v({0.9, 0.0}), N, smoothing(0.1, 12), 0);
  EXPECT_LE(est.value.norm(), 4.0 * c / (0.1 * std::sqrt(N)) * std::sqrt(2.0));
  EXPECT_EQ(estimate_smoothed_value(obj, v({0.9, 0.0}), 1000, smoothing(0.1, 12), 0).value, c);
}

TEST(Estimator, FarOutsideEveryDirectionTakesTheCap) {
  auto obj = direct(1, [](const Vector& z) { return z[0]; });
  obj.feasible_set = FeasibleSet::box(-1.0, 1.0, 1);
  obj.f_bar = 3.0;
  const auto est = estimate_hypergradient(obj, v({5.0}), 10000, smoothing(0.1, 13), 0);
  EXPECT_EQ(est.infeasible_count, 10000);
  EXPECT_EQ(est.oracle_counts.f, 0);
}

TEST(Estimator, BatchMeanOfQuadraticGradient) {
  const auto obj = direct(2, [](const Vector& z) { return z.squaredNorm(); });
  const Vector x = v({0.4, -0.3});
  const int B = 200;
  Vector mean = Vector::Zero(2), sq = Vector::Zero(2);
  for (int b = 0; b < B; ++b) {
    const auto e = estimate_hypergradient(obj, x, 1000, smoothing(0.1, 14), static_cast<std::uint64_t>(b));
    mean += e.value;
    sq += e.value.cwiseProduct(e.value);
  }
  mean /= B;
  const Vector se = ((sq / B - mean.cwiseProduct(mean)) / (B - 1.0)).cwiseSqrt();
  for (Eigen::Index i = 0; i < 2; ++i) EXPECT_NEAR(mean[i], 2.0 * x[i], 3.0 * se[i]);
}

TEST(Estimator, VarianceScalesInverselyWithN) {
  const auto obj = direct(1, [](const Vector& z) { return step_function(z[0]); });
  std::vector<double> lx, ly;
  for (int N : {100, 1000, 10000}) {
    const int B = 100;
    double s = 0.0, s2 = 0.0;
    for (int b = 0; b < B; ++b) {
      const double g = estimate_hypergradient(obj, v({0.0}), N, smoothing(0.05, 15), static_cast<std::uint64_t>(b)).value[0];
      s += g;
      s2 += g * g;
    }
    const double var = (s2 - s * s / B) / (B - 1);
    lx.push_back(std::log(static_cast<double>(N)));
    ly.push_back(std::log(var));
  }
  const double slope = (ly[2] - ly[0]) / (lx[2] - lx[0]);
  EXPECT_GE(slope, -1.2);
  EXPECT_LE(slope, -0.8);
}

TEST(SmoothedStep, ConvergesAsBandwidthShrinks) {
  for (double x : {-0.5, 0.5}) {
    double prev = INFINITY;
    for (double xi : {0.2, 0.1, 0.05, 0.025}) {
      const double err = std::abs(smoothed_step_reference(x, xi).value - step_function(x));
      if (prev > 0.0) EXPECT_LT(err, prev) << x << " " << xi;
      else EXPECT_EQ(err, 0.0);
      prev = err;
    }
  }
  EXPECT_NEAR(smoothed_step_reference(-1.0, 0.05).value, 1.0, 1e-12);
  EXPECT_NEAR(smoothed_step_reference(1.0, 0.05).value, 1.0, 1e-12);
  EXPECT_NEAR(smoothed_step_reference(0.0, 0.05).value, 0.5 + 0.05 / std::sqrt(2.0 * std::numbers::pi), 1e-15);
  const double h = 1e-6;
  EXPECT_NEAR(smoothed_step_reference(0.01, 0.05).derivative,
              (smoothed_step_reference(0.01 + h, 0.05).value - smoothed_step_reference(0.01 - h, 0.05).value) / (2 * h),
              1e-6);
  EXPECT_NEAR(gradient_norm_bound(1.0, 0.05), 15.9577, 1e-4);
  EXPECT_EQ(gradient_norm_bound(0.0, 0.05), 0.0);
  EXPECT_DOUBLE_EQ(lipschitz_bound(1.0, 0.1), 100.0);
}
