#pragma once

// Independent reference minimizer of the cubic model for m <= 3: a uniform
// grid over a ball that must contain the minimizer, then damped Newton polish
// from the best grid points.

#include "cdbo/core.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <vector>

namespace cubic_oracle {

using cdbo::Matrix;
using cdbo::Vector;

inline double model(const Vector& g, const Matrix& H, double M, const Vector& s) {
  const double r = s.norm();
  return g.dot(s) + 0.5 * s.dot(H * s) + M / 6.0 * r * r * r;
}

/// Radius beyond which the model is positive.
inline double radius_bound(const Vector& g, const Matrix& H, double M) {
  const double h = H.norm();
  return 3.0 * h / M + std::sqrt(9.0 * h * h / (M * M) + 6.0 * g.norm() / M) + 1e-6;
}

inline Vector polish(const Vector& g, const Matrix& H, double M, Vector s) {
  const Eigen::Index m = s.size();
  for (int it = 0; it < 200; ++it) {
    const double r = s.norm();
    const Vector grad = g + H * s + 0.5 * M * r * s;
    Matrix hess = H + 0.5 * M * r * Matrix::Identity(m, m);
    if (r > 0) hess += 0.5 * M * s * s.transpose() / r;
    // Levenberg shift keeps the step a descent direction.
    const double lmin = Eigen::SelfAdjointEigenSolver<Matrix>(hess, Eigen::EigenvaluesOnly).eigenvalues()[0];
    if (lmin <= 1e-12) hess += (1e-12 - lmin + 1e-8) * Matrix::Identity(m, m);
    Vector step = -hess.ldlt().solve(grad);
    double t = 1.0;
    const double f0 = model(g, H, M, s);
    while (t > 1e-16 && model(g, H, M, s + t * step) > f0) t *= 0.5;
    if (t <= 1e-16) break;
    s += t * step;
    if ((t * step).norm() < 1e-15 * (1.0 + s.norm())) break;
  }
  return s;
}

/// Minimum model value and its minimizer.
inline std::pair<double, Vector> minimize(const Vector& g, const Matrix& H, double M) {
  const Eigen::Index m = g.size();
  const double R = radius_bound(g, H, M);
  const int per_axis = m == 1 ? 40001 : (m == 2 ? 401 : 61);
  std::vector<std::pair<double, Vector>> cand;
  Vector s(m);
  std::vector<int> idx(static_cast<std::size_t>(m), 0);
  const double step = 2.0 * R / (per_axis - 1);
  while (true) {
    for (Eigen::Index i = 0; i < m; ++i) s[i] = -R + step * idx[static_cast<std::size_t>(i)];
    cand.emplace_back(model(g, H, M, s), s);
    Eigen::Index i = 0;
    while (i < m && ++idx[static_cast<std::size_t>(i)] == per_axis) idx[static_cast<std::size_t>(i++)] = 0;
    if (i == m) break;
  }
  std::partial_sort(cand.begin(), cand.begin() + 20, cand.end(),
                    [](const auto& a, const auto& b) { return a.first < b.first; });
  std::pair<double, Vector> best{0.0, Vector::Zero(m)};
  for (int k = 0; k < 20; ++k) {
    const Vector p = polish(g, H, M, cand[static_cast<std::size_t>(k)].second);
    const double v = model(g, H, M, p);
    if (v < best.first) best = {v, p};
  }
  return best;
}

}  // namespace cubic_oracle
