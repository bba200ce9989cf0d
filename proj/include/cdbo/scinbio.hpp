#pragma once

// Biased projected SGD on the smoothed hyperfunction:
//   x_{t+1} = proj_X(x_t - beta_t g_t),  g_t = MC gradient with N_t samples,
//   each sample solved by the lower method for K_t steps.

#include "cdbo/core.hpp"
#include "cdbo/lower.hpp"
#include "cdbo/problems.hpp"
#include "cdbo/rng.hpp"
#include "cdbo/smoothing.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace cdbo {

/// value(t) = min(cap, base + ceil(coef * (t + 1)^exponent)); coef = 0 gives a constant.
struct IntSchedule {
  int base = 1;
  double coef = 0.0;
  double exponent = 1.0;
  int cap = std::numeric_limits<int>::max();

  static IntSchedule constant(int v) { return {v, 0.0, 1.0, std::numeric_limits<int>::max()}; }

  int operator()(int t) const {
    double v = static_cast<double>(base);
    if (coef != 0.0) v += std::ceil(coef * std::pow(static_cast<double>(t) + 1.0, exponent));
    return static_cast<int>(std::min(v, static_cast<double>(cap)));
  }
};

/// beta_t: a constant or an explicit per-iteration list (last entry repeats).
struct StepSchedule {
  std::vector<double> values{0.005};
  double operator()(int t) const {
    if (values.empty()) return 0.0;
    return values[std::min(static_cast<std::size_t>(t), values.size() - 1)];
  }
};

struct Schedules {
  IntSchedule N = IntSchedule::constant(1);
  IntSchedule K = IntSchedule::constant(1);
  /// Tolerances carried as metadata only; the solver does not consume them.
  double n = 1.0;
  double d_hat = 0.0;
  double rho(int t) const { return 1.0 / (t + 1.0); }
  double delta(int t) const { return std::pow(t + 1.0, -2.0 / (n - d_hat)); }
};

/// N_t = t + 1 and K_t = base_K + ceil(c (t + 1)^{3/2}), both capped.
inline Schedules default_schedules(int n, double d_hat, int base_K, double c = 1.0, int N_max = 256,
                                   int K_max = 2000) {
  require(n >= 1, "default_schedules: n must be >= 1");
  require(d_hat >= 0.0 && d_hat < n, "default_schedules: need 0 <= d_hat < n");
  require(base_K >= 0 && c >= 0.0 && N_max >= 1 && K_max >= 1, "default_schedules: bad caps");
  Schedules s;
  s.N = IntSchedule{0, 1.0, 1.0, N_max};
  s.K = IntSchedule{base_K, c, 1.5, K_max};
  s.n = n;
  s.d_hat = d_hat;
  return s;
}

enum class OutputRule { last, random_index, best_mapping };

inline std::string to_string(OutputRule r) {
  switch (r) {
    case OutputRule::last: return "last";
    case OutputRule::random_index: return "random_index";
    case OutputRule::best_mapping: return "best_mapping";
  }
  return "last";
}

struct OuterConfig {
  int T = 100;
  StepSchedule beta;
  Schedules schedules;
  OutputRule output_rule = OutputRule::last;
  std::optional<Vector> x0;
  /// Solve the lower level once more at each x_t to record (x_t, y_hat(x_t)).
  bool record_phase = false;
  /// Re-estimate the mapping norm at each x_t with this many fresh samples (0 = off).
  int audit_samples = 0;

  void validate() const {
    require(T >= 0, "outer.T must be >= 0");
    require(!beta.values.empty(), "outer.beta must not be empty");
    for (double b : beta.values) require(b > 0.0 && std::isfinite(b), "outer.beta must be > 0");
    require(schedules.N.base >= 0 && schedules.N(0) >= 1, "outer.N must be >= 1");
    require(schedules.K(0) >= 1, "outer.K must be >= 1");
    require(audit_samples >= 0, "outer.audit_samples must be >= 0");
  }
};

struct OuterRecord {
  int t = 0;
  Vector x;
  Vector estimate;
  double beta = 0.0;
  double mapping_norm = 0.0;
  int N = 0;
  int K = 0;
  int infeasible_count = 0;
  double wall_time = 0.0;
  std::optional<Vector> y_hat;     // with record_phase
  std::optional<double> phi;       // f(x_t, y_hat(x_t)), with record_phase
  std::optional<double> audit_mapping_norm;
};

struct OuterTrace {
  std::vector<OuterRecord> records;
  Vector x_initial;
  Vector x_final;  // x_T
  Vector x_out;
  std::optional<int> R;
  OracleCounts total_oracle_counts;  // lower-level + f calls of the estimator only
  OracleCounts phase_oracle_counts;  // extra solves for record_phase / audit
};

/// (x - proj_X(x - beta d)) / beta.
inline Vector gradient_mapping(const Vector& x, const Vector& direction, double beta, const FeasibleSet& set) {
  require(beta > 0.0, "gradient_mapping: beta must be > 0");
  return (x - set.project(x - beta * direction)) / beta;
}

/// Weights beta_t - L beta_t^2 of the random output index.
inline std::vector<double> output_index_weights(const std::vector<double>& betas, double L) {
  std::vector<double> w;
  w.reserve(betas.size());
  for (std::size_t t = 0; t < betas.size(); ++t) {
    const double v = betas[t] - L * betas[t] * betas[t];
    if (!(v > 0.0)) {
      throw InputError("random_index output needs beta_t < 1/L = " + std::to_string(1.0 / L) +
                       "; beta_" + std::to_string(t) + " = " + std::to_string(betas[t]) +
                       " is too large, use a smaller step");
    }
    w.push_back(v);
  }
  return w;
}

/// Inverse-CDF draw from the normalized weights using counter stream `draw`.
inline int sample_output_index(const std::vector<double>& weights, std::uint64_t seed, std::uint64_t draw) {
  require(!weights.empty(), "sample_output_index: no weights");
  double total = 0.0;
  for (double w : weights) total += w;
  rng::Stream s(seed, rng::Domain::output_index, draw, 0);
  const double u = s.uniform() * total;
  double acc = 0.0;
  for (std::size_t t = 0; t < weights.size(); ++t) {
    acc += weights[t];
    if (u < acc) return static_cast<int>(t);
  }
  return static_cast<int>(weights.size()) - 1;
}

namespace detail {

/// Builds the per-iteration sample oracle for K steps of the lower method.
using OracleFactory = std::function<SampleOracle(int K)>;

struct PhaseProbe {
  std::function<std::pair<Vector, double>(const Vector& x, int K, OracleCounts& counts)> eval;
};

inline OuterTrace run_outer(const OracleFactory& factory, const FeasibleSet& set, double f_bar, const Vector& x_start,
                            const OuterConfig& outer, const SmoothingConfig& smoothing, const PhaseProbe* phase) {
  outer.validate();
  smoothing.validate();
  require(x_start.size() == set.dim(), "initial point has wrong dimension");
  const double L = lipschitz_bound(f_bar, smoothing.xi);
  if (outer.output_rule == OutputRule::random_index && outer.T > 0) {
    std::vector<double> betas;
    for (int t = 0; t < outer.T; ++t) betas.push_back(outer.beta(t));
    (void)output_index_weights(betas, L);  // validates before spending any work
  }

  OuterTrace trace;
  trace.x_initial = set.project(x_start);
  Vector x = trace.x_initial;
  trace.records.reserve(static_cast<std::size_t>(outer.T));
  for (int t = 0; t < outer.T; ++t) {
    const auto start = std::chrono::steady_clock::now();
    OuterRecord rec;
    rec.t = t;
    rec.x = x;
    rec.N = outer.schedules.N(t);
    rec.K = outer.schedules.K(t);
    rec.beta = outer.beta(t);
    const SampleOracle oracle = factory(rec.K);
    GradientEstimate est;
    try {
      est = estimate_hypergradient(oracle, x, rec.N, smoothing, static_cast<std::uint64_t>(t));
    } catch (const NumericalError& e) {
      throw NumericalError("outer iteration " + std::to_string(t) + ": " + e.what());
    }
    rec.estimate = est.value;
    rec.infeasible_count = est.infeasible_count;
    trace.total_oracle_counts += est.oracle_counts;
    rec.mapping_norm = gradient_mapping(x, est.value, rec.beta, set).norm();
    if (phase != nullptr && outer.record_phase) {
      auto [y, phi] = phase->eval(x, rec.K, trace.phase_oracle_counts);
      rec.y_hat = y;
      rec.phi = phi;
    }
    if (outer.audit_samples > 0) {
      const auto audit = estimate_hypergradient(oracle, x, outer.audit_samples, smoothing,
                                                static_cast<std::uint64_t>(t), rng::Domain::audit);
      trace.phase_oracle_counts += audit.oracle_counts;
      rec.audit_mapping_norm = gradient_mapping(x, audit.value, rec.beta, set).norm();
    }
    x = set.project(x - rec.beta * est.value);
    rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    trace.records.push_back(std::move(rec));
  }
  trace.x_final = x;

  switch (outer.output_rule) {
    case OutputRule::last:
      trace.x_out = x;
      break;
    case OutputRule::best_mapping: {
      if (trace.records.empty()) {
        trace.x_out = x;
        break;
      }
      std::size_t best = 0;
      for (std::size_t i = 1; i < trace.records.size(); ++i)
        if (trace.records[i].mapping_norm < trace.records[best].mapping_norm) best = i;
      trace.x_out = trace.records[best].x;
      break;
    }
    case OutputRule::random_index: {
      if (trace.records.empty()) {
        trace.x_out = x;
        break;
      }
      std::vector<double> betas;
      for (const auto& r : trace.records) betas.push_back(r.beta);
      const int R = sample_output_index(output_index_weights(betas, L), smoothing.master_seed, 0);
      trace.R = R;
      trace.x_out = trace.records[static_cast<std::size_t>(R)].x;
      break;
    }
  }
  return trace;
}

}  // namespace detail

inline Vector initial_point(const BilevelProblem& problem, const OuterConfig& outer) {
  if (outer.x0) return *outer.x0;
  const auto [lo, hi] = problem.feasible_set.bbox();
  return 0.5 * (lo + hi);
}

/// Runs the outer loop on a bilevel problem. The lower config's K is replaced
/// by the schedule value K_t at every iteration.
inline OuterTrace run_scinbio(const BilevelProblem& problem, const OuterConfig& outer,
                              const LowerSolverConfig& lower, const SmoothingConfig& smoothing) {
  problem.validate();
  lower.validate();
  auto factory = [&problem, lower](int K) {
    LowerSolverConfig c = lower;
    c.K = K;
    return make_sample_oracle(problem, c);
  };
  detail::PhaseProbe probe{[&problem, lower](const Vector& x, int K, OracleCounts& counts) {
    LowerSolverConfig c = lower;
    c.K = K;
    c.record_iterates = false;
    const auto r = solve_lower(problem, x, c);
    counts += r.oracle_counts;
    counts.f += 1;
    return std::pair<Vector, double>{r.y_hat, problem.f(x, r.y_hat)};
  }};
  return detail::run_outer(factory, problem.feasible_set, problem.f_bar, initial_point(problem, outer), outer,
                           smoothing, &probe);
}

/// Step lengths |x_{t+1} - x_t| for t = 0..T-1 (x_T is the final point).
inline std::vector<double> step_lengths(const OuterTrace& trace) {
  std::vector<double> d;
  d.reserve(trace.records.size());
  for (std::size_t t = 0; t < trace.records.size(); ++t) {
    const Vector& next = t + 1 < trace.records.size() ? trace.records[t + 1].x : trace.x_final;
    d.push_back((next - trace.records[t].x).norm());
  }
  return d;
}

/// Mean step length over the last `window` iterations divided by the smallest
/// mean over any `window` consecutive iterations. 1 means the tail is as calm
/// as the calmest stretch of the run.
inline double tail_stability_ratio(const OuterTrace& trace, int window = 500) {
  require(window >= 1, "tail_stability_ratio: window must be >= 1");
  const auto d = step_lengths(trace);
  if (d.empty()) return 1.0;
  const std::size_t w = std::min(d.size(), static_cast<std::size_t>(window));
  std::vector<double> prefix(d.size() + 1, 0.0);
  for (std::size_t i = 0; i < d.size(); ++i) prefix[i + 1] = prefix[i] + d[i];
  double min_mean = std::numeric_limits<double>::infinity();
  for (std::size_t s = 0; s + w <= d.size(); ++s) min_mean = std::min(min_mean, (prefix[s + w] - prefix[s]) / w);
  const double last = (prefix[d.size()] - prefix[d.size() - w]) / w;
  if (min_mean == 0.0) return last == 0.0 ? 1.0 : std::numeric_limits<double>::infinity();
  return last / min_mean;
}

/// Outer loop on a direct objective; requires a feasible set for projection.
inline OuterTrace run_scinbio(const DirectObjective& obj, const OuterConfig& outer, const SmoothingConfig& smoothing) {
  require(obj.feasible_set.has_value(), "run_scinbio: direct objective needs a feasible set");
  auto factory = [&obj](int) { return make_sample_oracle(obj); };
  const auto [lo, hi] = obj.feasible_set->bbox();
  const Vector start = outer.x0 ? *outer.x0 : Vector(0.5 * (lo + hi));
  return detail::run_outer(factory, *obj.feasible_set, obj.f_bar, start, outer, smoothing, nullptr);
}

}  // namespace cdbo
