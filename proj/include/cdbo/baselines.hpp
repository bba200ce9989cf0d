#pragma once

// Gradient descent-ascent on min_x max_y f(x, y) with closed-loop detection.

#include "cdbo/core.hpp"
#include "cdbo/problems.hpp"
#include "cdbo/rng.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace cdbo {

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

inline double distance(const Point2& a, const Point2& b) { return std::hypot(a.x - b.x, a.y - b.y); }

/// Distance from p to the segment [a, b].
inline double segment_distance(const Point2& p, const Point2& a, const Point2& b) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0.0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(p.x - (a.x + t * dx), p.y - (a.y + t * dy));
}

enum class GdaVerdict { converged, cycling, budget_exhausted };

inline std::string to_string(GdaVerdict v) {
  switch (v) {
    case GdaVerdict::converged: return "converged";
    case GdaVerdict::cycling: return "cycling";
    case GdaVerdict::budget_exhausted: return "budget_exhausted";
  }
  return "budget_exhausted";
}

struct CycleOptions {
  double eps = 1e-3;
  int min_period = 50;
  /// Leading points to discard; negative means half the trajectory.
  int transient = -1;
};

/// First pair (a, b), b - a >= min_period, a past the transient, where the
/// path returns to within eps of p_a (distance to the segment [p_b, p_{b+1}]),
/// after an excursion of at least 10 eps from p_a, and then retraces: each
/// p_{a+j}, j = 1..b-a, lies within 2 eps of the path near p_{b+j}. Requires
/// a full period of path after b, and p_a must recur once per period across
/// the whole tail.
inline std::optional<std::pair<int, int>> detect_cycle(const std::vector<Point2>& points, double eps,
                                                       int min_period, int transient) {
  const int L = static_cast<int>(points.size());
  require(transient >= 0 && transient < L, "detect_cycle: need 0 <= transient < len(points)");
  require(eps > 0.0 && min_period >= 1, "detect_cycle: need eps > 0 and min_period >= 1");
  double lo_x = points[transient].x, hi_x = lo_x, lo_y = points[transient].y, hi_y = lo_y;
  for (int i = transient; i < L; ++i) {
    lo_x = std::min(lo_x, points[i].x);
    hi_x = std::max(hi_x, points[i].x);
    lo_y = std::min(lo_y, points[i].y);
    hi_y = std::max(hi_y, points[i].y);
  }
  if (std::hypot(hi_x - lo_x, hi_y - lo_y) < 10.0 * eps) return std::nullopt;

  auto near_path = [&](const Point2& p, int k) {
    double d = distance(p, points[k]);
    if (k > 0) d = std::min(d, segment_distance(p, points[k - 1], points[k]));
    if (k + 1 < L) d = std::min(d, segment_distance(p, points[k], points[k + 1]));
    return d;
  };
  auto retraces = [&](int a, int b) {
    for (int j = 1; j <= b - a; ++j)
      if (near_path(points[a + j], b + j) > 2.0 * eps) return false;
    return true;
  };
  // p_a must stay within 2 eps of the path m periods earlier or later, for
  // every m that stays inside the tail; the window widens by one sample per
  // period to absorb phase drift. A slowly contracting spiral fails once its
  // drift adds up.
  auto recurs_near = [&](const Point2& p, int centre, int m) {
    double best = std::numeric_limits<double>::infinity();
    for (int k = std::max(transient, centre - m - 1); k <= std::min(L - 2, centre + m + 1); ++k)
      best = std::min(best, segment_distance(p, points[k], points[k + 1]));
    return best <= 2.0 * eps;
  };
  auto persists = [&](int a, int b) {
    const int period = b - a;
    for (int m = 2; a + m * period < L; ++m)
      if (!recurs_near(points[a], a + m * period, m)) return false;
    for (int m = 1; a - m * period >= transient; ++m)
      if (!recurs_near(points[a], a - m * period, m)) return false;
    return true;
  };

  for (int a = transient; a < L; ++a) {
    const Point2& pa = points[a];
    double excursion = 0.0;
    for (int j = a + 1; j < a + min_period && j < L; ++j) excursion = std::max(excursion, distance(points[j], pa));
    for (int b = a + min_period; 2 * b - a < L; ++b) {
      if (segment_distance(pa, points[b], points[b + 1]) <= eps && excursion >= 10.0 * eps && retraces(a, b) &&
          persists(a, b))
        return std::pair{a, b};
      excursion = std::max(excursion, distance(points[b], pa));
    }
  }
  return std::nullopt;
}

inline std::optional<std::pair<int, int>> detect_cycle(const std::vector<Point2>& points,
                                                       const CycleOptions& opt = {}) {
  const int transient = opt.transient < 0 ? static_cast<int>(points.size()) / 2 : opt.transient;
  return detect_cycle(points, opt.eps, opt.min_period, transient);
}

using GdaField = std::function<std::pair<double, double>(double x, double y)>;

struct GdaOptions {
  double step = 0.01;
  int max_steps = 50000;
  /// Stop as converged once the field norm is at most this.
  double conv_tol = 1e-6;
  /// Keep every stride-th iterate (the last one is always kept).
  int stride = 1;
  CycleOptions cycle;

  void validate() const {
    require(step > 0.0 && std::isfinite(step), "gda.step must be > 0");
    require(max_steps >= 0, "gda.max_steps must be >= 0");
    require(conv_tol >= 0.0, "gda.conv_tol must be >= 0");
    require(stride >= 1, "gda.stride must be >= 1");
    require(cycle.eps > 0.0, "gda.eps_cycle must be > 0");
    require(cycle.min_period >= 1, "gda.min_period must be >= 1");
  }
};

struct GdaTrace {
  std::vector<Point2> points;  // recorded iterates, including the start
  std::vector<int> steps;      // iteration index of each recorded point
  double step = 0.0;
  int steps_taken = 0;
  GdaVerdict verdict = GdaVerdict::budget_exhausted;
  std::optional<std::pair<int, int>> cycle_witness;  // indices into points

  /// Distance between the last point and the recorded point `window` steps earlier.
  double final_displacement(int window) const {
    if (points.size() < 2) return 0.0;
    const int target = steps.back() - window;
    std::size_t k = points.size() - 1;
    while (k > 0 && steps[k] > target) --k;
    return distance(points.back(), points[k]);
  }
};

/// Explicit Euler on the descent-ascent field: x -= h df/dx, y += h df/dy.
inline GdaTrace run_gda(const GdaField& grad, Point2 init, const GdaOptions& opt) {
  opt.validate();
  GdaTrace tr;
  tr.step = opt.step;
  Point2 p = init;
  tr.points.push_back(p);
  tr.steps.push_back(0);
  bool converged = false;
  int k = 0;
  for (; k < opt.max_steps; ++k) {
    const auto [gx, gy] = grad(p.x, p.y);
    if (!std::isfinite(gx) || !std::isfinite(gy))
      throw NumericalError("GDA field is not finite at step " + std::to_string(k));
    if (std::hypot(gx, gy) <= opt.conv_tol) {
      converged = true;
      break;
    }
    p.x -= opt.step * gx;
    p.y += opt.step * gy;
    if (!std::isfinite(p.x) || !std::isfinite(p.y))
      throw NumericalError("GDA iterate is not finite at step " + std::to_string(k + 1));
    if ((k + 1) % opt.stride == 0 || k + 1 == opt.max_steps) {
      tr.points.push_back(p);
      tr.steps.push_back(k + 1);
    }
  }
  tr.steps_taken = k;
  if (converged) {
    if (tr.steps.back() != k) {
      tr.points.push_back(p);
      tr.steps.push_back(k);
    }
    tr.verdict = GdaVerdict::converged;
    return tr;
  }
  tr.cycle_witness = detect_cycle(tr.points, opt.cycle);
  tr.verdict = tr.cycle_witness ? GdaVerdict::cycling : GdaVerdict::budget_exhausted;
  return tr;
}

inline GdaTrace run_gda_minimax(Point2 init, const GdaOptions& opt) {
  return run_gda([](double x, double y) { return minimax_gradient(x, y); }, init, opt);
}

/// Seeded initialization: uniform on [-2, 2]^2 from the initialization stream.
inline Point2 gda_initialization(std::uint64_t seed) {
  rng::Stream s(seed, rng::Domain::initialization, 0, 0);
  Point2 p;
  p.x = s.uniform(-2.0, 2.0);
  p.y = s.uniform(-2.0, 2.0);
  return p;
}

}  // namespace cdbo
