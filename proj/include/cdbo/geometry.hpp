#pragma once

// Bifurcation-set diagnostics for families g(x, .) with a scalar lower variable.

#include "cdbo/core.hpp"
#include "cdbo/problems.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace cdbo {

enum class FoldClass { fold, non_fold_degenerate, nondegenerate, undetermined };

inline std::string to_string(FoldClass c) {
  switch (c) {
    case FoldClass::fold: return "fold";
    case FoldClass::non_fold_degenerate: return "non_fold_degenerate";
    case FoldClass::nondegenerate: return "nondegenerate";
    case FoldClass::undetermined: return "undetermined";
  }
  return "undetermined";
}

struct StationaryPointRecord {
  Vector x;
  Vector y;
  double grad_norm = 0.0;
  double lambda_min_abs = 0.0;
  bool degenerate = false;
  FoldClass fold_class = FoldClass::undetermined;
};

struct BifurcationScan {
  int resolution = 0;  // cells per axis
  Vector lo, hi;       // scanned box
  std::vector<char> indicator;  // row-major: index = i2 * resolution + i1
  std::vector<double> nearest_lambda;  // min |lambda| over records at the cell center
  std::vector<StationaryPointRecord> branch_points;

  double cell_width(int axis) const { return (hi[axis] - lo[axis]) / resolution; }
  Vector cell_center(int i1, int i2) const {
    Vector c(2);
    c << lo[0] + (i1 + 0.5) * cell_width(0), lo[1] + (i2 + 0.5) * cell_width(1);
    return c;
  }
  bool marked(int i1, int i2) const { return indicator[static_cast<std::size_t>(i2 * resolution + i1)] != 0; }
  std::vector<Vector> marked_centers() const {
    std::vector<Vector> out;
    for (int i2 = 0; i2 < resolution; ++i2)
      for (int i1 = 0; i1 < resolution; ++i1)
        if (marked(i1, i2)) out.push_back(cell_center(i1, i2));
    return out;
  }
  std::size_t marked_count() const {
    return static_cast<std::size_t>(std::count(indicator.begin(), indicator.end(), char{1}));
  }
};

struct DimensionEstimate {
  std::vector<double> radii;
  std::vector<long long> counts;
  double slope = 0.0;  // of log N against log r
  double d_hat = 0.0;
  double r_squared_fit = 0.0;
  bool determined = true;
};

/// 1e-6 (1 + |H|_inf): a stationary point is degenerate below this |lambda|.
inline double degeneracy_threshold(const Matrix& hess) {
  return 1e-6 * (1.0 + hess.cwiseAbs().rowwise().sum().maxCoeff());
}

constexpr double kFoldThreshold = 1e-4;

namespace detail {

inline Vector sorted_abs_eigenvalues(const Matrix& h) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (h + h.transpose()), Eigen::EigenvaluesOnly);
  Vector a = eig.eigenvalues().cwiseAbs();
  std::sort(a.data(), a.data() + a.size());
  return a;
}

inline StationaryPointRecord make_record(const BilevelProblem& p, const Vector& x, double y) {
  StationaryPointRecord r;
  r.x = x;
  r.y = Vector::Constant(1, y);
  r.grad_norm = p.grad_y_g(x, r.y).norm();
  const Matrix h = p.hess_yy_g(x, r.y);
  r.lambda_min_abs = sorted_abs_eigenvalues(h)[0];
  r.degenerate = r.lambda_min_abs < degeneracy_threshold(h);
  r.fold_class = r.degenerate ? FoldClass::undetermined : FoldClass::nondegenerate;
  return r;
}

}  // namespace detail

/// Roots of dg/dy(x, .) on [lo, hi]: sign changes on a uniform grid refined
/// by bisection, deduplicated at (hi - lo) / (10 resolution).
inline std::vector<double> stationary_roots_1d(const BilevelProblem& problem, const Vector& x,
                                               std::pair<double, double> y_range, int resolution) {
  if (problem.m != 1) throw InputError("find_stationary_points_1d: requires m = 1");
  if (resolution < 2) throw InputError("find_stationary_points_1d: resolution must be >= 2");
  const auto [lo, hi] = y_range;
  require(hi > lo, "find_stationary_points_1d: empty y range");
  Vector yv(1);
  auto d = [&](double y) {
    yv[0] = y;
    return problem.grad_y_g(x, yv)[0];
  };
  const double h = (hi - lo) / (resolution - 1);
  std::vector<double> roots;
  double y_prev = lo, d_prev = d(lo);
  if (d_prev == 0.0) roots.push_back(lo);
  for (int j = 1; j < resolution; ++j) {
    const double y = (j == resolution - 1) ? hi : lo + j * h;
    const double dy = d(y);
    if (dy == 0.0) {
      roots.push_back(y);
    } else if (d_prev != 0.0 && std::signbit(dy) != std::signbit(d_prev)) {
      double a = y_prev, b = y, da = d_prev;
      double mid = 0.5 * (a + b);
      for (int it = 0; it < 200; ++it) {
        mid = 0.5 * (a + b);
        const double dm = d(mid);
        if (std::abs(dm) <= 1e-12 * (1.0 + std::abs(mid)) || mid == a || mid == b) break;
        if (std::signbit(dm) == std::signbit(da)) {
          a = mid;
          da = dm;
        } else {
          b = mid;
        }
      }
      roots.push_back(mid);
    }
    y_prev = y;
    d_prev = dy;
  }
  const double dedup = (hi - lo) / (10.0 * resolution);
  std::vector<double> out;
  for (double r : roots)
    if (out.empty() || r - out.back() >= dedup) out.push_back(r);
  return out;
}

inline std::vector<StationaryPointRecord> find_stationary_points_1d(const BilevelProblem& problem, const Vector& x,
                                                                    std::pair<double, double> y_range,
                                                                    int resolution) {
  std::vector<StationaryPointRecord> recs;
  for (double y : stationary_roots_1d(problem, x, y_range, resolution))
    recs.push_back(detail::make_record(problem, x, y));
  return recs;
}

namespace detail {

/// Solves dg/dy = 0, d2g/dy2 = 0 for (s, y) with x = a + s (b - a), starting
/// from (s0, y0). Newton with finite-difference Jacobian and step halving.
inline std::optional<std::pair<double, double>> newton_fold(const BilevelProblem& p, const Vector& a,
                                                            const Vector& b, double s0, double y0) {
  Vector yv(1);
  auto F = [&](double s, double y) {
    const Vector x = a + s * (b - a);
    yv[0] = y;
    return Eigen::Vector2d(p.grad_y_g(x, yv)[0], p.hess_yy_g(x, yv)(0, 0));
  };
  double s = s0, y = y0;
  Eigen::Vector2d Fv = F(s, y);
  for (int it = 0; it < 80; ++it) {
    const double hs = 1e-7, hy = 1e-7 * (1.0 + std::abs(y));
    Eigen::Matrix2d J;
    J.col(0) = (F(s + hs, y) - F(s - hs, y)) / (2.0 * hs);
    J.col(1) = (F(s, y + hy) - F(s, y - hy)) / (2.0 * hy);
    const double det = J.determinant();
    if (!std::isfinite(det) || det == 0.0) return std::nullopt;
    const Eigen::Vector2d step = J.lu().solve(-Fv);
    double t = 1.0;
    bool accepted = false;
    for (int ls = 0; ls < 30; ++ls) {
      const Eigen::Vector2d Fn = F(s + t * step[0], y + t * step[1]);
      if (Fn.allFinite() && Fn.norm() < Fv.norm()) {
        s += t * step[0];
        y += t * step[1];
        Fv = Fn;
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    if (!accepted) break;
    if (std::abs(step[0]) < 1e-15 && std::abs(step[1]) < 1e-15 * (1.0 + std::abs(y))) break;
  }
  const Vector x = a + s * (b - a);
  yv[0] = y;
  const double scale = 1.0 + p.hess_yy_g(x, yv).cwiseAbs().maxCoeff();
  if (std::abs(Fv[0]) > 1e-9 * (1.0 + std::abs(y)) * scale || std::abs(Fv[1]) > 1e-7 * scale) return std::nullopt;
  return std::pair{s, y};
}

/// Locates a degenerate stationary point on the segment [a, b] where the root
/// count changes, by bisection in s on the count near the merging pair, then
/// Newton polish.
inline std::optional<StationaryPointRecord> locate_degenerate(const BilevelProblem& p, const Vector& a,
                                                              const Vector& b, const std::vector<double>& roots_a,
                                                              const std::vector<double>& roots_b,
                                                              std::pair<double, double> y_range, int y_res) {
  const bool a_more = roots_a.size() > roots_b.size();
  const auto& more = a_more ? roots_a : roots_b;
  if (more.size() < 2) return std::nullopt;
  // The pair that is about to merge: the closest adjacent roots.
  std::size_t k = 0;
  for (std::size_t i = 1; i + 1 < more.size(); ++i)
    if (more[i + 1] - more[i] < more[k + 1] - more[k]) k = i;
  double s_more = a_more ? 0.0 : 1.0, s_less = a_more ? 1.0 : 0.0;
  double ylo = more[k], yhi = more[k + 1];
  const double coarse = (y_range.second - y_range.first) / (y_res - 1);
  for (int it = 0; it < 40; ++it) {
    const double s = 0.5 * (s_more + s_less);
    const Vector x = a + s * (b - a);
    const double w = std::max(4.0 * coarse, 2.0 * (yhi - ylo));
    const auto local = stationary_roots_1d(p, x, {ylo - w, yhi + w}, 400);
    std::optional<std::pair<double, double>> pair;
    for (std::size_t i = 0; i + 1 < local.size(); ++i) {
      const double c = 0.5 * (local[i] + local[i + 1]);
      if (!pair || std::abs(c - 0.5 * (ylo + yhi)) < std::abs(0.5 * (pair->first + pair->second) - 0.5 * (ylo + yhi)))
        pair = std::pair{local[i], local[i + 1]};
    }
    if (pair && pair->second - pair->first <= 2.0 * (yhi - ylo) + 4.0 * coarse) {
      s_more = s;
      ylo = pair->first;
      yhi = pair->second;
    } else {
      s_less = s;
    }
    if (std::abs(s_more - s_less) < 1e-6) break;
  }
  const auto sol = newton_fold(p, a, b, 0.5 * (s_more + s_less), 0.5 * (ylo + yhi));
  if (!sol) return std::nullopt;
  const auto [s, y] = *sol;
  if (s < -0.01 || s > 1.01) return std::nullopt;
  if (y < y_range.first || y > y_range.second) return std::nullopt;
  auto rec = make_record(p, a + std::clamp(s, 0.0, 1.0) * (b - a), y);
  if (!rec.degenerate) return std::nullopt;
  return rec;
}

}  // namespace detail

/// Scans a 2-D parameter box for cells containing degenerate stationary
/// points. Root counts are computed at cell centers; a cell is marked when a
/// center record is degenerate, or when the count differs from a neighbor's
/// and a degenerate point is located on the connecting segment (it then marks
/// the cell that contains it).
inline BifurcationScan scan_bifurcation_set(const BilevelProblem& problem, int grid_resolution,
                                            std::pair<double, double> y_range, int y_resolution) {
  if (problem.n != 2 || problem.m != 1) {
    throw InputError("scan_bifurcation_set: requires n = 2 and m = 1 (got n = " + std::to_string(problem.n) +
                     ", m = " + std::to_string(problem.m) + ")");
  }
  if (grid_resolution < 2) throw InputError("scan_bifurcation_set: grid resolution must be >= 2");
  if (y_resolution < 2) throw InputError("scan_bifurcation_set: y resolution must be >= 2");
  BifurcationScan scan;
  scan.resolution = grid_resolution;
  std::tie(scan.lo, scan.hi) = problem.feasible_set.bbox();
  const int R = grid_resolution;
  const auto cells = static_cast<std::size_t>(R) * static_cast<std::size_t>(R);
  scan.indicator.assign(cells, 0);
  scan.nearest_lambda.assign(cells, std::numeric_limits<double>::infinity());
  std::vector<std::vector<double>> roots(cells);
  auto idx = [R](int i1, int i2) { return static_cast<std::size_t>(i2) * static_cast<std::size_t>(R) + static_cast<std::size_t>(i1); };

  for (int i2 = 0; i2 < R; ++i2) {
    for (int i1 = 0; i1 < R; ++i1) {
      const Vector c = scan.cell_center(i1, i2);
      roots[idx(i1, i2)] = stationary_roots_1d(problem, c, y_range, y_resolution);
      for (double y : roots[idx(i1, i2)]) {
        auto rec = detail::make_record(problem, c, y);
        scan.nearest_lambda[idx(i1, i2)] = std::min(scan.nearest_lambda[idx(i1, i2)], rec.lambda_min_abs);
        if (rec.degenerate) scan.indicator[idx(i1, i2)] = 1;
        scan.branch_points.push_back(std::move(rec));
      }
    }
  }

  auto cell_of = [&](const Vector& x) {
    int i1 = static_cast<int>(std::floor((x[0] - scan.lo[0]) / scan.cell_width(0)));
    int i2 = static_cast<int>(std::floor((x[1] - scan.lo[1]) / scan.cell_width(1)));
    return std::pair{std::clamp(i1, 0, R - 1), std::clamp(i2, 0, R - 1)};
  };
  auto probe = [&](int a1, int a2, int b1, int b2) {
    const auto& ra = roots[idx(a1, a2)];
    const auto& rb = roots[idx(b1, b2)];
    if (ra.size() == rb.size()) return;
    const auto rec = detail::locate_degenerate(problem, scan.cell_center(a1, a2), scan.cell_center(b1, b2), ra, rb,
                                               y_range, y_resolution);
    if (!rec) return;
    const auto [c1, c2] = cell_of(rec->x);
    scan.indicator[idx(c1, c2)] = 1;
    scan.nearest_lambda[idx(c1, c2)] = std::min(scan.nearest_lambda[idx(c1, c2)], rec->lambda_min_abs);
    scan.branch_points.push_back(*rec);
  };
  for (int i2 = 0; i2 < R; ++i2) {
    for (int i1 = 0; i1 < R; ++i1) {
      if (i1 + 1 < R) probe(i1, i2, i1 + 1, i2);
      if (i2 + 1 < R) probe(i1, i2, i1, i2 + 1);
    }
  }
  return scan;
}

/// Classifies a degenerate stationary point against the three fold
/// conditions: a single zero eigenvalue with null vector v, a nonzero
/// parameter derivative of grad_y g^T v, and a nonzero third derivative of g
/// along v (5-point central stencil).
inline FoldClass check_fold_conditions(const BilevelProblem& problem, const StationaryPointRecord& record,
                                       double fd_step = 1e-4) {
  if (!record.degenerate) throw InputError("check_fold_conditions: record is not degenerate");
  const Vector& x = record.x;
  const Vector& y = record.y;
  const Matrix h = problem.hess_yy_g(x, y);
  const double tau_det = degeneracy_threshold(h);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (h + h.transpose()));
  const Vector& lam = eig.eigenvalues();
  Eigen::Index k0 = 0;
  for (Eigen::Index i = 1; i < lam.size(); ++i)
    if (std::abs(lam[i]) < std::abs(lam[k0])) k0 = i;
  const Vector v = eig.eigenvectors().col(k0);

  enum class Verdict { holds, fails, unclear };
  auto judge = [](double value, double threshold) {
    if (value >= threshold) return Verdict::holds;
    if (value <= threshold / 10.0) return Verdict::fails;
    return Verdict::unclear;
  };

  // (1) exactly one zero eigenvalue.
  Verdict c1 = Verdict::holds;
  if (lam.size() > 1) {
    double second = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < lam.size(); ++i)
      if (i != k0) second = std::min(second, std::abs(lam[i]));
    if (second >= 10.0 * tau_det) c1 = Verdict::holds;
    else if (second < tau_det) c1 = Verdict::fails;
    else c1 = Verdict::unclear;
  }

  // (2) transversality: d/dx (grad_y g(x, y)^T v).
  const Vector transversal = problem.cross_partials(x, y, fd_step).transpose() * v;
  const Verdict c2 = judge(transversal.norm(), kFoldThreshold);

  // (3) third directional derivative along v.
  const double hstep = fd_step * (1.0 + y.norm());
  auto gline = [&](double t) { return problem.g(x, Vector(y + t * v)); };
  const double third = (gline(2.0 * hstep) - 2.0 * gline(hstep) + 2.0 * gline(-hstep) - gline(-2.0 * hstep)) /
                       (2.0 * hstep * hstep * hstep);
  const Verdict c3 = judge(std::abs(third), kFoldThreshold);

  if (c1 == Verdict::fails || c2 == Verdict::fails || c3 == Verdict::fails) return FoldClass::non_fold_degenerate;
  if (c1 == Verdict::holds && c2 == Verdict::holds && c3 == Verdict::holds) return FoldClass::fold;
  return FoldClass::undetermined;
}

namespace detail {

inline void least_squares_line(const std::vector<double>& xs, const std::vector<double>& ys, double& slope,
                               double& intercept, double& r2) {
  const double n = static_cast<double>(xs.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sx += xs[i];
    sy += ys[i];
    sxx += xs[i] * xs[i];
    sxy += xs[i] * ys[i];
  }
  const double den = n * sxx - sx * sx;
  slope = den != 0.0 ? (n * sxy - sx * sy) / den : 0.0;
  intercept = (sy - slope * sx) / n;
  double ss_res = 0, ss_tot = 0;
  const double mean = sy / n;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double pred = intercept + slope * xs[i];
    ss_res += (ys[i] - pred) * (ys[i] - pred);
    ss_tot += (ys[i] - mean) * (ys[i] - mean);
  }
  r2 = ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : 1.0;
}

}  // namespace detail

/// Least-squares slope of log N(r) against log r, where N(r) counts occupied
/// axis-aligned boxes of side 2r anchored at the points' lower corner.
inline DimensionEstimate box_counting_dimension(const std::vector<Vector>& points, const std::vector<double>& radii) {
  require(!points.empty(), "box_counting_dimension: no points");
  require(radii.size() >= 2, "box_counting_dimension: need at least two radii");
  for (std::size_t i = 0; i < radii.size(); ++i) {
    require(radii[i] > 0.0, "box_counting_dimension: radii must be positive");
    if (i > 0) require(radii[i] < radii[i - 1], "box_counting_dimension: radii must be strictly decreasing");
  }
  const Eigen::Index n = points.front().size();
  Vector origin = points.front();
  for (const auto& p : points) origin = origin.cwiseMin(p);

  DimensionEstimate est;
  est.radii = radii;
  std::vector<double> lx, ly;
  for (double r : radii) {
    std::set<std::vector<long long>> boxes;
    std::vector<long long> key(static_cast<std::size_t>(n));
    for (const auto& p : points) {
      for (Eigen::Index j = 0; j < n; ++j)
        key[static_cast<std::size_t>(j)] = static_cast<long long>(std::floor((p[j] - origin[j]) / (2.0 * r)));
      boxes.insert(key);
    }
    est.counts.push_back(static_cast<long long>(boxes.size()));
    lx.push_back(std::log(r));
    ly.push_back(std::log(static_cast<double>(boxes.size())));
  }
  const std::set<long long> distinct(est.counts.begin(), est.counts.end());
  if (distinct.size() < 2) {
    est.determined = false;
    est.slope = 0.0;
    est.d_hat = std::numeric_limits<double>::quiet_NaN();
    est.r_squared_fit = 0.0;
    return est;
  }
  double intercept = 0.0;
  detail::least_squares_line(lx, ly, est.slope, intercept, est.r_squared_fit);
  est.d_hat = -est.slope;
  return est;
}

/// Area of the delta-tube around the marked cells: cells whose center lies
/// within delta of a marked center, times the cell area.
inline std::vector<std::pair<double, double>> neighborhood_measure(const BifurcationScan& scan,
                                                                   const std::vector<double>& deltas) {
  require(scan.resolution > 0 && !scan.indicator.empty(), "neighborhood_measure: empty scan");
  const int R = scan.resolution;
  const double w1 = scan.cell_width(0), w2 = scan.cell_width(1);
  std::vector<std::pair<int, int>> marked;
  for (int i2 = 0; i2 < R; ++i2)
    for (int i1 = 0; i1 < R; ++i1)
      if (scan.marked(i1, i2)) marked.emplace_back(i1, i2);
  std::vector<std::pair<double, double>> out;
  std::vector<char> in(static_cast<std::size_t>(R) * static_cast<std::size_t>(R));
  for (double delta : deltas) {
    require(delta >= 0.0, "neighborhood_measure: delta must be >= 0");
    std::fill(in.begin(), in.end(), char{0});
    const int r1 = static_cast<int>(std::ceil(delta / w1)), r2 = static_cast<int>(std::ceil(delta / w2));
    for (const auto& [m1, m2] : marked) {
      for (int j2 = std::max(0, m2 - r2); j2 <= std::min(R - 1, m2 + r2); ++j2) {
        for (int j1 = std::max(0, m1 - r1); j1 <= std::min(R - 1, m1 + r1); ++j1) {
          const double d1 = (j1 - m1) * w1, d2 = (j2 - m2) * w2;
          if (d1 * d1 + d2 * d2 <= delta * delta * (1.0 + 1e-12))
            in[static_cast<std::size_t>(j2) * static_cast<std::size_t>(R) + static_cast<std::size_t>(j1)] = 1;
        }
      }
    }
    const auto count = std::count(in.begin(), in.end(), char{1});
    out.emplace_back(delta, static_cast<double>(count) * w1 * w2);
  }
  return out;
}

struct GradientFloor {
  double value = std::numeric_limits<double>::infinity();  // min |dg/dy| found
  int cells_used = 0;
};

/// Empirical lower bound on |dg/dy| away from degeneracy: the minimum over
/// scan cells whose center lies farther than delta from every marked center,
/// and over y-grid points farther than r from every stationary point at that
/// center. Infinite when no cell qualifies.
inline GradientFloor min_gradient_outside_tubes(const BilevelProblem& problem, const BifurcationScan& scan,
                                                double delta, double r, std::pair<double, double> y_range,
                                                int y_resolution) {
  require(scan.resolution > 0 && !scan.indicator.empty(), "min_gradient_outside_tubes: empty scan");
  require(delta >= 0.0 && r >= 0.0, "min_gradient_outside_tubes: delta and r must be >= 0");
  const auto marked = scan.marked_centers();
  const int R = scan.resolution;
  const auto [lo, hi] = y_range;
  const double h = (hi - lo) / (y_resolution - 1);
  GradientFloor out;
  Vector yv(1);
  for (int i2 = 0; i2 < R; ++i2) {
    for (int i1 = 0; i1 < R; ++i1) {
      const Vector c = scan.cell_center(i1, i2);
      bool far = true;
      for (const auto& m : marked)
        if ((m - c).norm() <= delta) {
          far = false;
          break;
        }
      if (!far) continue;
      ++out.cells_used;
      const auto roots = stationary_roots_1d(problem, c, y_range, y_resolution);
      for (int j = 0; j < y_resolution; ++j) {
        const double y = lo + j * h;
        bool clear = true;
        for (double root : roots) clear = clear && std::abs(y - root) > r;
        if (!clear) continue;
        yv[0] = y;
        out.value = std::min(out.value, std::abs(problem.grad_y_g(c, yv)[0]));
      }
    }
  }
  return out;
}

}  // namespace cdbo
