#pragma once

// Gaussian smoothing of the algorithm-defined hyperfunction
//   phi(x) = f(x, y_hat(x)),  y_hat from a fixed lower-level solver run,
// extended by f_bar outside the feasible set, and its Monte Carlo gradient
//   (1 / (N xi)) sum_i u_i f(x + xi u_i, y_hat(x + xi u_i)),  u_i ~ N(0, I).

#include "cdbo/core.hpp"
#include "cdbo/lower.hpp"
#include "cdbo/problems.hpp"
#include "cdbo/rng.hpp"

#include <exception>
#include <functional>
#include <numbers>
#include <optional>
#include <thread>
#include <vector>

namespace cdbo {

struct SmoothingConfig {
  double xi = 0.1;
  std::uint64_t master_seed = 0;
  /// Worker threads for per-sample solves. Results do not depend on it.
  int threads = 1;

  void validate() const {
    require(xi > 0.0 && std::isfinite(xi), "smoothing.xi must be > 0");
    require(threads >= 1, "smoothing.threads must be >= 1");
  }
};

struct GradientEstimate {
  Vector value;
  int samples_used = 0;
  std::vector<double> per_sample_f;
  int infeasible_count = 0;
  /// Per-coordinate standard error of value, from the sample spread of u_i f_i / xi.
  Vector standard_error;
  OracleCounts oracle_counts;
};

struct ValueEstimate {
  double value = 0.0;
  double standard_error = 0.0;
  int samples_used = 0;
  int infeasible_count = 0;
  OracleCounts oracle_counts;
};

/// What one smoothing sample evaluates to.
struct SampleOutcome {
  double f = 0.0;
  bool feasible = true;
  OracleCounts counts;
};

/// Maps a perturbed point z = x + xi u to its hyperfunction value.
using SampleOracle = std::function<SampleOutcome(const Vector& z)>;

/// Scalar replacement of the (f, lower solve) pipeline, for validating the
/// estimator against closed forms. Without a set it is evaluated everywhere.
struct DirectObjective {
  Eigen::Index n = 1;
  std::function<double(const Vector&)> phi;
  std::optional<FeasibleSet> feasible_set;
  double f_bar = 0.0;
};

inline double gaussian_kernel(const Vector& z, double xi) {
  const double n = static_cast<double>(z.size());
  return std::pow(2.0 * std::numbers::pi * xi * xi, -0.5 * n) * std::exp(-z.squaredNorm() / (2.0 * xi * xi));
}

/// sqrt(2/pi) f_bar / xi: ceiling on the smoothed hyperfunction's gradient norm.
inline double gradient_norm_bound(double f_bar, double xi) {
  require(f_bar >= 0.0 && xi > 0.0, "gradient_norm_bound: need f_bar >= 0, xi > 0");
  return std::sqrt(2.0 / std::numbers::pi) * f_bar / xi;
}

/// f_bar / xi^2: Lipschitz constant of the smoothed hyperfunction's gradient.
inline double lipschitz_bound(double f_bar, double xi) {
  require(f_bar >= 0.0 && xi > 0.0, "lipschitz_bound: need f_bar >= 0, xi > 0");
  return f_bar / (xi * xi);
}

struct SmoothedStep {
  double value;
  double derivative;
};

/// Exact convolution of phi(z) = -z (z <= 0), 1 (z > 0) with the Gaussian
/// kernel of bandwidth xi:
///   Phi(x/xi) - x Phi(-x/xi) + xi pdf(x/xi),  derivative pdf(x/xi)/xi - Phi(-x/xi).
inline SmoothedStep smoothed_step_reference(double x, double xi) {
  require(xi > 0.0, "smoothed_step_reference: xi must be > 0");
  const double t = x / xi;
  const double cdf = 0.5 * std::erfc(-t / std::numbers::sqrt2);
  const double cdf_neg = 0.5 * std::erfc(t / std::numbers::sqrt2);
  const double pdf = std::exp(-0.5 * t * t) / std::sqrt(2.0 * std::numbers::pi);
  return {cdf - x * cdf_neg + xi * pdf, pdf / xi - cdf_neg};
}

inline double step_function(double z) { return z <= 0.0 ? -z : 1.0; }

/// Sample oracle for a bilevel problem: infeasible points take f_bar, the
/// rest run the lower solver at z from y0 (cold start every time).
inline SampleOracle make_sample_oracle(const BilevelProblem& problem, LowerSolverConfig lower) {
  lower.record_iterates = false;
  return [&problem, lower](const Vector& z) {
    SampleOutcome out;
    if (!problem.feasible_set.contains(z)) {
      out.f = problem.f_bar;
      out.feasible = false;
      return out;
    }
    const LowerSolveResult r = solve_lower(problem, z, lower);
    out.counts = r.oracle_counts;
    out.f = problem.f(z, r.y_hat);
    out.counts.f += 1;
    if (!std::isfinite(out.f)) throw NumericalError("upper objective is not finite");
    return out;
  };
}

inline SampleOracle make_sample_oracle(const DirectObjective& obj) {
  return [&obj](const Vector& z) {
    SampleOutcome out;
    if (obj.feasible_set && !obj.feasible_set->contains(z)) {
      out.f = obj.f_bar;
      out.feasible = false;
      return out;
    }
    out.f = obj.phi(z);
    out.counts.f = 1;
    return out;
  };
}

namespace detail {

struct SampleBatch {
  std::vector<Vector> u;
  std::vector<SampleOutcome> outcomes;
};

/// Draws N directions from (seed, domain, tag, i) and evaluates them, possibly
/// on several threads; output order is sample order. The first failing sample
/// (lowest index) is reported.
inline SampleBatch draw_and_evaluate(const SampleOracle& oracle, const Vector& x, int N, double xi,
                                     std::uint64_t seed, rng::Domain domain, std::uint64_t tag,
                                     int threads) {
  require(N >= 1, "number of samples N must be >= 1");
  SampleBatch batch;
  batch.u.resize(static_cast<std::size_t>(N));
  batch.outcomes.resize(static_cast<std::size_t>(N));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(N));

  auto work = [&](int begin, int end) {
    for (int i = begin; i < end; ++i) {
      const auto idx = static_cast<std::size_t>(i);
      rng::Stream stream(seed, domain, tag, static_cast<std::uint64_t>(i));
      batch.u[idx] = stream.normal_vector(x.size());
      try {
        batch.outcomes[idx] = oracle(x + xi * batch.u[idx]);
      } catch (...) {
        errors[idx] = std::current_exception();
      }
    }
  };
  const int workers = std::max(1, std::min(threads, N));
  if (workers == 1) {
    work(0, N);
  } else {
    std::vector<std::jthread> pool;
    const int chunk = (N + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
      const int b = w * chunk, e = std::min(N, b + chunk);
      if (b < e) pool.emplace_back(work, b, e);
    }
  }
  for (int i = 0; i < N; ++i) {
    if (const auto& err = errors[static_cast<std::size_t>(i)]) {
      try {
        std::rethrow_exception(err);
      } catch (const Error& e) {
        throw NumericalError("sample " + std::to_string(i) + ": " + e.what());
      }
    }
  }
  return batch;
}

}  // namespace detail

inline GradientEstimate estimate_hypergradient(const SampleOracle& oracle, const Vector& x, int N,
                                               const SmoothingConfig& smoothing, std::uint64_t stream_tag,
                                               rng::Domain domain = rng::Domain::smoothing_sample) {
  smoothing.validate();
  const auto batch = detail::draw_and_evaluate(oracle, x, N, smoothing.xi, smoothing.master_seed, domain,
                                               stream_tag, smoothing.threads);
  const Eigen::Index n = x.size();
  GradientEstimate est;
  est.samples_used = N;
  est.value = Vector::Zero(n);
  Vector sq = Vector::Zero(n);
  est.per_sample_f.reserve(static_cast<std::size_t>(N));
  for (std::size_t i = 0; i < batch.u.size(); ++i) {
    const auto& o = batch.outcomes[i];
    const Vector term = batch.u[i] * (o.f / smoothing.xi);
    est.value += term;
    sq += term.cwiseProduct(term);
    est.per_sample_f.push_back(o.f);
    if (!o.feasible) ++est.infeasible_count;
    est.oracle_counts += o.counts;
  }
  const double dN = static_cast<double>(N);
  est.value /= dN;
  if (N > 1) {
    const Vector var = ((sq / dN) - est.value.cwiseProduct(est.value)) * (dN / (dN - 1.0));
    est.standard_error = (var.cwiseMax(0.0) / dN).cwiseSqrt();
  } else {
    est.standard_error = Vector::Constant(n, std::numeric_limits<double>::infinity());
  }
  return est;
}

inline GradientEstimate estimate_hypergradient(const BilevelProblem& problem, const Vector& x, int N,
                                               const SmoothingConfig& smoothing, const LowerSolverConfig& lower,
                                               std::uint64_t stream_tag) {
  require(x.size() == problem.n, "estimate_hypergradient: x has wrong dimension");
  return estimate_hypergradient(make_sample_oracle(problem, lower), x, N, smoothing, stream_tag);
}

inline GradientEstimate estimate_hypergradient(const DirectObjective& obj, const Vector& x, int N,
                                               const SmoothingConfig& smoothing, std::uint64_t stream_tag) {
  require(x.size() == obj.n, "estimate_hypergradient: x has wrong dimension");
  return estimate_hypergradient(make_sample_oracle(obj), x, N, smoothing, stream_tag);
}

inline ValueEstimate estimate_smoothed_value(const SampleOracle& oracle, const Vector& x, int N,
                                             const SmoothingConfig& smoothing, std::uint64_t stream_tag) {
  smoothing.validate();
  const auto batch = detail::draw_and_evaluate(oracle, x, N, smoothing.xi, smoothing.master_seed,
                                               rng::Domain::smoothing_sample, stream_tag, smoothing.threads);
  ValueEstimate est;
  est.samples_used = N;
  double sum = 0.0, sq = 0.0;
  for (const auto& o : batch.outcomes) {
    sum += o.f;
    sq += o.f * o.f;
    if (!o.feasible) ++est.infeasible_count;
    est.oracle_counts += o.counts;
  }
  const double dN = static_cast<double>(N);
  est.value = sum / dN;
  est.standard_error = N > 1 ? std::sqrt(std::max(0.0, (sq / dN - est.value * est.value) / (dN - 1.0)))
                             : std::numeric_limits<double>::infinity();
  return est;
}

inline ValueEstimate estimate_smoothed_value(const BilevelProblem& problem, const Vector& x, int N,
                                             const SmoothingConfig& smoothing, const LowerSolverConfig& lower,
                                             std::uint64_t stream_tag) {
  require(x.size() == problem.n, "estimate_smoothed_value: x has wrong dimension");
  return estimate_smoothed_value(make_sample_oracle(problem, lower), x, N, smoothing, stream_tag);
}

inline ValueEstimate estimate_smoothed_value(const DirectObjective& obj, const Vector& x, int N,
                                             const SmoothingConfig& smoothing, std::uint64_t stream_tag) {
  require(x.size() == obj.n, "estimate_smoothed_value: x has wrong dimension");
  return estimate_smoothed_value(make_sample_oracle(obj), x, N, smoothing, stream_tag);
}

}  // namespace cdbo
