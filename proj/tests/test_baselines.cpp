#include "cdbo/baselines.hpp"
#include "cdbo/rng.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

using namespace cdbo;

namespace {

std::vector<Point2> circle(int points_per_turn, int turns, double radius = 1.0) {
  std::vector<Point2> out;
  for (int k = 0; k < points_per_turn * turns; ++k) {
    const double a = 2.0 * std::numbers::pi * k / points_per_turn + 0.1234;
    out.push_back({radius * std::cos(a), radius * std::sin(a)});
  }
  return out;
}

/// Descent-ascent field whose flow is the Hopf normal form with a stable
/// limit cycle on the unit circle.
std::pair<double, double> hopf(double x, double y) {
  const double r2 = x * x + y * y;
  return {-(x * (1.0 - r2) - y), y * (1.0 - r2) + x};
}

}  // namespace

TEST(Segment, Distances) {
  EXPECT_DOUBLE_EQ(segment_distance({0, 1}, {-1, 0}, {1, 0}), 1.0);
  EXPECT_DOUBLE_EQ(segment_distance({3, 4}, {0, 0}, {0, 0}), 5.0);
  EXPECT_DOUBLE_EQ(segment_distance({2, 1}, {-1, 0}, {1, 0}), std::sqrt(2.0));
  EXPECT_DOUBLE_EQ(distance({0, 0}, {3, 4}), 5.0);
}

TEST(CycleDetection, PeriodicOrbitIsFound) {
  const auto pts = circle(200, 6);
  const auto w = detect_cycle(pts, 1e-3, 50, 0);
  ASSERT_TRUE(w.has_value());
  // The return is detected on the segment [p_b, p_{b+1}] that passes p_a.
  const int gap = w->second - w->first;
  EXPECT_TRUE(gap == 199 || gap == 200) << gap;
}

TEST(CycleDetection, ConvergingSpiralIsNotACycle) {
  std::vector<Point2> pts;
  for (int k = 0; k < 4000; ++k) {
    const double a = 2.0 * std::numbers::pi * k / 200.0, r = std::exp(-k / 2000.0);
    pts.push_back({r * std::cos(a), r * std::sin(a)});
  }
  EXPECT_FALSE(detect_cycle(pts, CycleOptions{}).has_value());
}

TEST(CycleDetection, StationaryAndStraightPathsAreNotCycles) {
  EXPECT_FALSE(detect_cycle(std::vector<Point2>(1000, Point2{0.5, 0.5}), CycleOptions{}).has_value());
  std::vector<Point2> line;
  for (int k = 0; k < 1000; ++k) line.push_back({k * 0.01, 0.0});
  EXPECT_FALSE(detect_cycle(line, 1e-3, 50, 0).has_value());
}

TEST(CycleDetection, ShortOrbitsAreIgnored) {
  // Period 20 is below min_period 50 but multiples of it qualify.
  const auto w = detect_cycle(circle(20, 40), 1e-3, 50, 0);
  ASSERT_TRUE(w.has_value());
  const int gap = w->second - w->first;
  EXPECT_TRUE(gap % 20 == 0 || (gap + 1) % 20 == 0) << gap;
  EXPECT_GE(w->second - w->first, 50);
}

TEST(CycleDetection, RejectsBadArguments) {
  const auto pts = circle(10, 2);
  EXPECT_THROW(detect_cycle(pts, 1e-3, 5, 20), InputError);
  EXPECT_THROW(detect_cycle(pts, 0.0, 5, 0), InputError);
  EXPECT_THROW(detect_cycle(pts, 1e-3, 0, 0), InputError);
}

TEST(Gda, LimitCycleIsCycling) {
  GdaOptions opt;
  opt.max_steps = 20000;
  const auto tr = run_gda(hopf, {0.2, 0.0}, opt);
  EXPECT_EQ(tr.verdict, GdaVerdict::cycling);
  ASSERT_TRUE(tr.cycle_witness.has_value());
  // Period of the linearized rotation is 2 pi / h steps.
  const int period = tr.cycle_witness->second - tr.cycle_witness->first;
  EXPECT_NEAR(period, 2.0 * std::numbers::pi / opt.step, 5.0);
  EXPECT_NEAR(std::hypot(tr.points.back().x, tr.points.back().y), 1.0, 0.01);
}

TEST(Gda, SaddleFieldConverges) {
  GdaOptions opt;
  const auto tr = run_gda([](double x, double y) { return std::pair{x, -y}; }, {1.0, -1.0}, opt);
  EXPECT_EQ(tr.verdict, GdaVerdict::converged);
  // |p_k| = sqrt(2) (1 - h)^k falls below conv_tol after this many steps.
  const int expected = static_cast<int>(std::ceil(std::log(opt.conv_tol / std::sqrt(2.0)) / std::log(1.0 - opt.step)));
  EXPECT_EQ(tr.steps_taken, expected);
  EXPECT_EQ(tr.steps.back(), expected);
  EXPECT_LE(std::hypot(tr.points.back().x, tr.points.back().y), opt.conv_tol);
}

TEST(Gda, BudgetExhausted) {
  GdaOptions opt;
  opt.max_steps = 10;
  const auto tr = run_gda_minimax({0.3, 0.4}, opt);
  EXPECT_EQ(tr.verdict, GdaVerdict::budget_exhausted);
  EXPECT_EQ(tr.points.size(), 11u);
  EXPECT_EQ(tr.steps_taken, 10);
}

TEST(Gda, StrideKeepsTheLastPoint) {
  GdaOptions opt;
  opt.max_steps = 25;
  opt.stride = 10;
  const auto tr = run_gda_minimax({0.3, 0.4}, opt);
  EXPECT_EQ(tr.steps, (std::vector<int>{0, 10, 20, 25}));
}

TEST(Gda, UpdateRule) {
  GdaOptions opt;
  opt.max_steps = 1;
  const Point2 p0{0.7, -0.2};
  const auto tr = run_gda_minimax(p0, opt);
  const auto [gx, gy] = minimax_gradient(p0.x, p0.y);
  EXPECT_DOUBLE_EQ(tr.points[1].x, p0.x - opt.step * gx);
  EXPECT_DOUBLE_EQ(tr.points[1].y, p0.y + opt.step * gy);
}

TEST(Gda, NonFiniteFieldReportsStep) {
  GdaOptions opt;
  opt.max_steps = 100;
  int calls = 0;
  const auto field = [&calls](double, double) {
    return ++calls > 5 ? std::pair{std::nan(""), 0.0} : std::pair{1.0, 1.0};
  };
  try {
    run_gda(field, {0.0, 0.0}, opt);
    FAIL() << "expected an error";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("step 5"), std::string::npos) << e.what();
  }
}

TEST(Gda, OptionsValidation) {
  GdaOptions opt;
  opt.step = 0.0;
  EXPECT_THROW(opt.validate(), InputError);
  opt = {};
  opt.max_steps = -1;
  EXPECT_THROW(opt.validate(), InputError);
  opt = {};
  opt.cycle.eps = 0.0;
  EXPECT_THROW(opt.validate(), InputError);
}

TEST(Gda, FinalDisplacement) {
  GdaTrace tr;
  for (int k = 0; k <= 100; ++k) {
    tr.points.push_back({static_cast<double>(k), 0.0});
    tr.steps.push_back(k);
  }
  EXPECT_DOUBLE_EQ(tr.final_displacement(30), 30.0);
  EXPECT_DOUBLE_EQ(tr.final_displacement(1000), 100.0);
}

TEST(Gda, SeededInitialization) {
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto p = gda_initialization(s);
    EXPECT_GE(p.x, -2.0);
    EXPECT_LE(p.x, 2.0);
    EXPECT_GE(p.y, -2.0);
    EXPECT_LE(p.y, 2.0);
    EXPECT_EQ(p.x, gda_initialization(s).x);
  }
  EXPECT_NE(gda_initialization(0).x, gda_initialization(1).x);
}

TEST(CycleDetection, CircleAt360StepsPerPeriod) {
  const auto w = detect_cycle(circle(360, 5), 1e-3, 50, 0);
  ASSERT_TRUE(w.has_value());
  EXPECT_NEAR(w->second - w->first, 360, 1);
}

TEST(CycleDetection, ContractingSpiralsNeverFire) {
  rng::Stream s(51, rng::Domain::test, 0, 0);
  for (int k = 0; k < 50; ++k) {
    const double rate = s.uniform(1e-4, 5e-3), per = s.uniform(60, 400), r0 = s.uniform(0.1, 3.0);
    std::vector<Point2> pts;
    for (int i = 0; i < 20000; ++i) {
      const double a = 2.0 * std::numbers::pi * i / per, r = r0 * std::exp(-rate * i);
      pts.push_back({r * std::cos(a), r * std::sin(a)});
    }
    EXPECT_FALSE(detect_cycle(pts, CycleOptions{}).has_value()) << k;
  }
}

TEST(Gda, ConvexConcaveSaddleConverges) {
  // f = x^2 - y^2 has field (2x, -2y).
  rng::Stream s(52, rng::Domain::test, 0, 0);
  for (int k = 0; k < 10; ++k) {
    const Point2 init{s.uniform(-2, 2), s.uniform(-2, 2)};
    const auto tr = run_gda([](double x, double y) { return std::pair{2.0 * x, -2.0 * y}; }, init, GdaOptions{});
    EXPECT_EQ(tr.verdict, GdaVerdict::converged);
    EXPECT_LT(std::hypot(tr.points.back().x, tr.points.back().y), 1e-4);
  }
}

TEST(Gda, BilinearGameGainsNorm) {
  // f = x y has field (y, x); each Euler step scales |z|^2 by 1 + h^2.
  GdaOptions opt;
  opt.max_steps = 2000;
  const auto tr = run_gda([](double x, double y) { return std::pair{y, x}; }, {0.3, -0.1}, opt);
  for (std::size_t k = 1; k < tr.points.size(); ++k) {
    const double prev = tr.points[k - 1].x * tr.points[k - 1].x + tr.points[k - 1].y * tr.points[k - 1].y;
    const double cur = tr.points[k].x * tr.points[k].x + tr.points[k].y * tr.points[k].y;
    ASSERT_NEAR(cur / prev, 1.0 + opt.step * opt.step, 1e-12);
  }
}
