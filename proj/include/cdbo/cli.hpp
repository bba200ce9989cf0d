#pragma once

// Command-line front end: configuration, multi-seed orchestration and output.

#include "cdbo/baselines.hpp"
#include "cdbo/core.hpp"
#include "cdbo/geometry.hpp"
#include "cdbo/io.hpp"
#include "cdbo/lower.hpp"
#include "cdbo/problems.hpp"
#include "cdbo/rng.hpp"
#include "cdbo/scinbio.hpp"
#include "cdbo/smoothing.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace cdbo::cli {

using json = nlohmann::json;
namespace fs = std::filesystem;

enum ExitCode : int { ok = 0, config_error = 2, numerical_error = 3, io_error = 4 };

struct ScanSettings {
  int grid_resolution = 200;
  int y_resolution = 400;
  std::pair<double, double> y_range{-1.0, 1.0};
  std::vector<double> radii;
  std::vector<double> deltas;
};

struct GdaSettings {
  GdaOptions options;
  /// Non-cycling runs count as stable when they move at most this far over the final window.
  double stable_displacement = 1e-5;
  int stable_window = 1000;
};

struct EstimateSettings {
  std::optional<Vector> x;
  int N = 1000;
  int batches = 10;
};

struct RunConfig {
  std::string problem = "minimax";
  std::vector<std::int64_t> seeds{0};
  std::string output_dir = "cdbo_out";
  std::set<std::string> emit{"csv", "json", "svg"};
  int stride = 1;
  int jobs = 1;
  OuterConfig outer;
  LowerSolverConfig lower;
  SmoothingConfig smoothing;
  ScanSettings scan;
  GdaSettings gda;
  EstimateSettings estimate;
  /// Fully resolved configuration document, echoed into every JSON output.
  json resolved;
};

namespace detail {

inline json default_scan(const std::string& problem, const ProblemLibraryEntry& e) {
  const int grid = problem == "quartic" ? 300 : 200;
  const int yres = problem == "quartic" ? 3200 : 400;
  return json{{"grid_resolution", grid},
              {"y_resolution", yres},
              {"y_range", {e.y_window.first, e.y_window.second}},
              {"radii", nullptr},
              {"deltas", nullptr}};
}

}  // namespace detail

/// Defaults for a problem: the library's recommended lower solver, constant
/// N = 3, K = the recommended iteration count, beta = 0.005, xi = 0.1.
inline json default_config_json(const std::string& problem) {
  const auto lib = problem_library();
  const auto& e = find_problem(lib, problem);
  json j;
  j["problem"] = problem;
  j["seeds"] = json::array({0});
  j["output_dir"] = "cdbo_out";
  j["emit"] = json::array({"csv", "json", "svg"});
  j["stride"] = 1;
  j["jobs"] = 1;
  j["outer"] = json{{"T", 10000},           {"beta", 0.005},         {"N", 3},
                    {"K", e.lower.K},       {"output_rule", "last"}, {"audit_samples", 0},
                    {"x0", nullptr}};
  j["lower"] = json{{"method", e.lower.method},
                    {"eta", e.lower.eta > 0.0 ? e.lower.eta : 0.01},
                    {"M", e.lower.M > 0.0 ? e.lower.M : 1.0},
                    {"grad_tol", 0.0},
                    {"selection", "automatic"}};
  j["smoothing"] = json{{"xi", 0.1}, {"master_seed", 0}, {"threads", 1}};
  j["scan"] = detail::default_scan(problem, e);
  const GdaSettings g;
  j["gda"] = json{{"step", g.options.step},
                  {"max_steps", g.options.max_steps},
                  {"conv_tol", g.options.conv_tol},
                  {"eps_cycle", g.options.cycle.eps},
                  {"min_period", g.options.cycle.min_period},
                  {"stable_displacement", g.stable_displacement},
                  {"stable_window", g.stable_window}};
  j["estimate"] = json{{"x", nullptr}, {"N", 1000}, {"batches", 10}};
  return j;
}

namespace detail {

/// Reads typed fields out of a config document, collecting every problem.
class Reader {
 public:
  explicit Reader(std::vector<std::string>& errors) : errors_(errors) {}

  void unknown_keys(const json& doc, const json& reference, const std::string& prefix = "") {
    if (!doc.is_object()) return;
    for (auto it = doc.begin(); it != doc.end(); ++it) {
      const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
      if (!reference.contains(it.key())) {
        errors_.push_back("unknown config key '" + path + "'");
      } else if (reference[it.key()].is_object()) {
        unknown_keys(it.value(), reference[it.key()], path);
      }
    }
  }

  const json* at(const json& doc, const std::string& path) {
    const json* cur = &doc;
    std::size_t start = 0;
    while (start <= path.size()) {
      const std::size_t dot = path.find('.', start);
      const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (!cur->is_object() || !cur->contains(key)) return nullptr;
      cur = &(*cur)[key];
      if (dot == std::string::npos) break;
      start = dot + 1;
    }
    return cur;
  }

  double number(const json& doc, const std::string& path, double fallback) {
    const json* v = at(doc, path);
    if (v == nullptr || v->is_null()) return fallback;
    if (!v->is_number()) {
      errors_.push_back(path + ": expected a number");
      return fallback;
    }
    return v->get<double>();
  }

  std::int64_t integer(const json& doc, const std::string& path, std::int64_t fallback) {
    const json* v = at(doc, path);
    if (v == nullptr || v->is_null()) return fallback;
    if (!v->is_number_integer() && !(v->is_number_float() && v->get<double>() == std::floor(v->get<double>()))) {
      errors_.push_back(path + ": expected an integer");
      return fallback;
    }
    return v->get<std::int64_t>();
  }

  std::string string(const json& doc, const std::string& path, const std::string& fallback) {
    const json* v = at(doc, path);
    if (v == nullptr || v->is_null()) return fallback;
    if (!v->is_string()) {
      errors_.push_back(path + ": expected a string");
      return fallback;
    }
    return v->get<std::string>();
  }

  std::optional<std::vector<double>> numbers(const json& doc, const std::string& path) {
    const json* v = at(doc, path);
    if (v == nullptr || v->is_null()) return std::nullopt;
    if (v->is_number()) return std::vector<double>{v->get<double>()};
    if (!v->is_array()) {
      errors_.push_back(path + ": expected a number or a list of numbers");
      return std::nullopt;
    }
    std::vector<double> out;
    for (const auto& e : *v) {
      if (!e.is_number()) {
        errors_.push_back(path + ": expected a list of numbers");
        return std::nullopt;
      }
      out.push_back(e.get<double>());
    }
    return out;
  }

  IntSchedule schedule(const json& doc, const std::string& path, IntSchedule fallback) {
    const json* v = at(doc, path);
    if (v == nullptr || v->is_null()) return fallback;
    if (v->is_number_integer()) return IntSchedule::constant(v->get<int>());
    if (!v->is_object()) {
      errors_.push_back(path + ": expected an integer or {base, coef, exponent, cap}");
      return fallback;
    }
    for (auto it = v->begin(); it != v->end(); ++it)
      if (it.key() != "base" && it.key() != "coef" && it.key() != "exponent" && it.key() != "cap")
        errors_.push_back("unknown config key '" + path + "." + it.key() + "'");
    IntSchedule s;
    s.base = static_cast<int>(integer(doc, path + ".base", 0));
    s.coef = number(doc, path + ".coef", 0.0);
    s.exponent = number(doc, path + ".exponent", 1.0);
    s.cap = static_cast<int>(integer(doc, path + ".cap", std::numeric_limits<int>::max()));
    return s;
  }

  void check(bool ok, const std::string& message) {
    if (!ok) errors_.push_back(message);
  }

 private:
  std::vector<std::string>& errors_;
};

}  // namespace detail

/// Parses a resolved configuration document; every validation failure is
/// reported together in one InputError.
inline RunConfig parse_config(const json& doc) {
  std::vector<std::string> errors;
  detail::Reader rd(errors);
  RunConfig c;
  c.problem = rd.string(doc, "problem", "minimax");
  const auto lib = problem_library();
  bool known = false;
  for (const auto& e : lib) known = known || e.name == c.problem;
  if (!known) {
    std::string names;
    for (const auto& e : lib) names += (names.empty() ? "" : ", ") + e.name;
    throw InputError("problem: unknown problem '" + c.problem + "' (known: " + names + ")");
  }
  rd.unknown_keys(doc, default_config_json(c.problem));

  c.seeds.clear();
  if (const json* s = rd.at(doc, "seeds"); s != nullptr && s->is_array()) {
    for (const auto& v : *s) {
      if (v.is_number_integer()) c.seeds.push_back(v.get<std::int64_t>());
      else errors.push_back("seeds: expected a list of integers");
    }
  } else {
    errors.push_back("seeds: expected a list of integers");
  }
  rd.check(!c.seeds.empty(), "seeds: must not be empty");
  for (auto s : c.seeds) rd.check(s >= 0, "seeds: must be >= 0");

  c.output_dir = rd.string(doc, "output_dir", "cdbo_out");
  rd.check(!c.output_dir.empty(), "output_dir: must not be empty");
  c.emit.clear();
  if (const json* e = rd.at(doc, "emit"); e != nullptr && e->is_array()) {
    for (const auto& v : *e) {
      const std::string k = v.is_string() ? v.get<std::string>() : "";
      if (k == "csv" || k == "json" || k == "svg") c.emit.insert(k);
      else errors.push_back("emit: entries must be csv, json or svg");
    }
  } else {
    errors.push_back("emit: expected a list");
  }
  c.stride = static_cast<int>(rd.integer(doc, "stride", 1));
  rd.check(c.stride >= 1, "stride: must be >= 1");
  c.jobs = static_cast<int>(rd.integer(doc, "jobs", 1));
  rd.check(c.jobs >= 1, "jobs: must be >= 1");

  // outer
  c.outer.T = static_cast<int>(rd.integer(doc, "outer.T", 10000));
  rd.check(c.outer.T >= 1, "outer.T: must be >= 1");
  if (auto b = rd.numbers(doc, "outer.beta")) c.outer.beta.values = *b;
  rd.check(!c.outer.beta.values.empty(), "outer.beta: must not be empty");
  for (double b : c.outer.beta.values) {
    if (!(b > 0.0) || !std::isfinite(b)) {
      errors.push_back("outer.beta: must be > 0 (got " + io::fmt(b) + ")");
      break;
    }
  }
  c.outer.schedules.N = rd.schedule(doc, "outer.N", IntSchedule::constant(3));
  c.outer.schedules.K = rd.schedule(doc, "outer.K", IntSchedule::constant(1));
  rd.check(c.outer.schedules.N(0) >= 1 && c.outer.schedules.N.cap >= 1, "outer.N: must be >= 1");
  rd.check(c.outer.schedules.K(0) >= 1 && c.outer.schedules.K.cap >= 1, "outer.K: must be >= 1");
  const std::string rule = rd.string(doc, "outer.output_rule", "last");
  if (rule == "last") c.outer.output_rule = OutputRule::last;
  else if (rule == "random_index") c.outer.output_rule = OutputRule::random_index;
  else if (rule == "best_mapping") c.outer.output_rule = OutputRule::best_mapping;
  else errors.push_back("outer.output_rule: must be last, random_index or best_mapping");
  c.outer.audit_samples = static_cast<int>(rd.integer(doc, "outer.audit_samples", 0));
  rd.check(c.outer.audit_samples >= 0, "outer.audit_samples: must be >= 0");
  const auto& entry = find_problem(lib, c.problem);
  if (auto x0 = rd.numbers(doc, "outer.x0")) {
    if (static_cast<Eigen::Index>(x0->size()) != entry.problem.n)
      errors.push_back("outer.x0: expected " + std::to_string(entry.problem.n) + " components");
    else c.outer.x0 = Eigen::Map<const Vector>(x0->data(), static_cast<Eigen::Index>(x0->size()));
  }
  c.outer.record_phase = true;

  // lower
  const std::string method = rd.string(doc, "lower.method", "gradient_descent");
  if (method == "gradient_descent") c.lower.method = LowerMethod::gradient_descent;
  else if (method == "cubic_newton") c.lower.method = LowerMethod::cubic_newton;
  else errors.push_back("lower.method: must be gradient_descent or cubic_newton");
  c.lower.eta = rd.number(doc, "lower.eta", 0.01);
  c.lower.M = rd.number(doc, "lower.M", 1.0);
  c.lower.grad_tol = rd.number(doc, "lower.grad_tol", 0.0);
  c.lower.K = c.outer.schedules.K(0) >= 1 ? c.outer.schedules.K(0) : 1;
  rd.check(c.lower.eta > 0.0, "lower.eta: must be > 0");
  rd.check(c.lower.M > 0.0, "lower.M: must be > 0");
  rd.check(c.lower.grad_tol >= 0.0, "lower.grad_tol: must be >= 0");
  const std::string sel = rd.string(doc, "lower.selection", "automatic");
  if (sel == "automatic") c.lower.selection = Selection::automatic;
  else if (sel == "last") c.lower.selection = Selection::last;
  else if (sel == "stationarity") c.lower.selection = Selection::stationarity;
  else if (sel == "min_grad_norm") c.lower.selection = Selection::min_grad_norm;
  else errors.push_back("lower.selection: must be automatic, last, stationarity or min_grad_norm");
  if (c.lower.method == LowerMethod::gradient_descent && c.lower.selection == Selection::stationarity)
    errors.push_back("lower.selection: stationarity selection needs lower.method = cubic_newton");

  // smoothing
  c.smoothing.xi = rd.number(doc, "smoothing.xi", 0.1);
  rd.check(c.smoothing.xi > 0.0 && std::isfinite(c.smoothing.xi), "smoothing.xi: must be > 0");
  const std::int64_t ms = rd.integer(doc, "smoothing.master_seed", 0);
  rd.check(ms >= 0, "smoothing.master_seed: must be >= 0");
  c.smoothing.master_seed = static_cast<std::uint64_t>(ms);
  c.smoothing.threads = static_cast<int>(rd.integer(doc, "smoothing.threads", 1));
  rd.check(c.smoothing.threads >= 1, "smoothing.threads: must be >= 1");

  if (c.outer.output_rule == OutputRule::random_index) {
    const double L = lipschitz_bound(entry.problem.f_bar, c.smoothing.xi > 0.0 ? c.smoothing.xi : 1.0);
    for (double b : c.outer.beta.values)
      if (b > 0.0 && b - L * b * b <= 0.0) {
        errors.push_back("outer.beta: random_index output needs beta < 1/L = " + io::fmt(1.0 / L) +
                         "; use a smaller step");
        break;
      }
  }

  // scan
  c.scan.grid_resolution = static_cast<int>(rd.integer(doc, "scan.grid_resolution", 200));
  c.scan.y_resolution = static_cast<int>(rd.integer(doc, "scan.y_resolution", 400));
  rd.check(c.scan.grid_resolution >= 2, "scan.grid_resolution: must be >= 2");
  rd.check(c.scan.y_resolution >= 2, "scan.y_resolution: must be >= 2");
  if (auto yr = rd.numbers(doc, "scan.y_range")) {
    if (yr->size() != 2 || !((*yr)[1] > (*yr)[0])) errors.push_back("scan.y_range: expected [lo, hi] with lo < hi");
    else c.scan.y_range = {(*yr)[0], (*yr)[1]};
  }
  if (auto r = rd.numbers(doc, "scan.radii")) c.scan.radii = *r;
  if (auto d = rd.numbers(doc, "scan.deltas")) c.scan.deltas = *d;
  for (std::size_t i = 0; i < c.scan.radii.size(); ++i) {
    if (!(c.scan.radii[i] > 0.0) || (i > 0 && !(c.scan.radii[i] < c.scan.radii[i - 1]))) {
      errors.push_back("scan.radii: must be positive and strictly decreasing");
      break;
    }
  }
  if (!c.scan.radii.empty() && c.scan.radii.size() < 2) errors.push_back("scan.radii: need at least two radii");
  for (double d : c.scan.deltas)
    if (!(d >= 0.0)) {
      errors.push_back("scan.deltas: must be >= 0");
      break;
    }

  // gda
  auto& g = c.gda;
  g.options.step = rd.number(doc, "gda.step", 0.01);
  g.options.max_steps = static_cast<int>(rd.integer(doc, "gda.max_steps", 50000));
  g.options.conv_tol = rd.number(doc, "gda.conv_tol", 1e-6);
  g.options.cycle.eps = rd.number(doc, "gda.eps_cycle", 1e-3);
  g.options.cycle.min_period = static_cast<int>(rd.integer(doc, "gda.min_period", 50));
  g.stable_displacement = rd.number(doc, "gda.stable_displacement", 1e-5);
  g.stable_window = static_cast<int>(rd.integer(doc, "gda.stable_window", 1000));
  rd.check(g.options.step > 0.0, "gda.step: must be > 0");
  rd.check(g.options.max_steps >= 1, "gda.max_steps: must be >= 1");
  rd.check(g.options.conv_tol >= 0.0, "gda.conv_tol: must be >= 0");
  rd.check(g.options.cycle.eps > 0.0, "gda.eps_cycle: must be > 0");
  rd.check(g.options.cycle.min_period >= 1, "gda.min_period: must be >= 1");
  rd.check(g.stable_displacement >= 0.0, "gda.stable_displacement: must be >= 0");
  rd.check(g.stable_window >= 1, "gda.stable_window: must be >= 1");

  // estimate
  if (auto x = rd.numbers(doc, "estimate.x")) {
    if (static_cast<Eigen::Index>(x->size()) != entry.problem.n)
      errors.push_back("estimate.x: expected " + std::to_string(entry.problem.n) + " components");
    else c.estimate.x = Eigen::Map<const Vector>(x->data(), static_cast<Eigen::Index>(x->size()));
  }
  c.estimate.N = static_cast<int>(rd.integer(doc, "estimate.N", 1000));
  c.estimate.batches = static_cast<int>(rd.integer(doc, "estimate.batches", 10));
  rd.check(c.estimate.N >= 1, "estimate.N: must be >= 1");
  rd.check(c.estimate.batches >= 2, "estimate.batches: must be >= 2");

  if (!errors.empty()) {
    std::string msg = "invalid configuration:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw InputError(msg);
  }
  c.resolved = doc;
  return c;
}

/// Config file (JSON) merged over the problem's defaults, then flag overrides.
inline RunConfig resolve_config(const std::optional<std::string>& config_path, const json& overrides) {
  json file = json::object();
  if (config_path) {
    std::ifstream in(*config_path);
    if (!in) throw IoError("cannot read config file '" + *config_path + "'");
    try {
      file = json::parse(in);
    } catch (const json::parse_error& e) {
      throw InputError("config file '" + *config_path + "' is not valid JSON: " + e.what());
    }
    if (!file.is_object()) throw InputError("config file '" + *config_path + "' must hold a JSON object");
  }
  std::string problem = "minimax";
  if (file.contains("problem") && file["problem"].is_string()) problem = file["problem"].get<std::string>();
  if (overrides.contains("problem") && overrides["problem"].is_string())
    problem = overrides["problem"].get<std::string>();
  json doc;
  {
    const auto lib = problem_library();
    bool known = false;
    for (const auto& e : lib) known = known || e.name == problem;
    if (!known) (void)find_problem(lib, problem);  // throws with the list of names
    doc = default_config_json(problem);
  }
  doc.merge_patch(file);
  doc.merge_patch(overrides);
  // merge_patch drops keys set to null; restore them so the echo stays complete.
  const json defaults = default_config_json(problem);
  for (const auto& [section, value] : defaults.items()) {
    if (!doc.contains(section)) doc[section] = value;
    else if (value.is_object() && doc[section].is_object())
      for (const auto& [k, v] : value.items())
        if (!doc[section].contains(k)) doc[section][k] = nullptr;
  }
  return parse_config(doc);
}

/// Parses "3", "0,2,5" or "0-14" into a seed list.
inline std::vector<std::int64_t> parse_seed_list(const std::string& text) {
  std::vector<std::int64_t> out;
  std::stringstream ss(text);
  std::string part;
  auto to_int = [&](const std::string& s) {
    std::size_t pos = 0;
    long long v = 0;
    try {
      v = std::stoll(s, &pos);
    } catch (const std::exception&) {
      throw InputError("--seed: cannot parse '" + text + "'");
    }
    if (pos != s.size() || v < 0) throw InputError("--seed: cannot parse '" + text + "'");
    return static_cast<std::int64_t>(v);
  };
  while (std::getline(ss, part, ',')) {
    if (part.empty()) continue;
    const auto dash = part.find('-');
    if (dash != std::string::npos && dash > 0) {
      const auto a = to_int(part.substr(0, dash)), b = to_int(part.substr(dash + 1));
      if (b < a) throw InputError("--seed: empty range '" + part + "'");
      for (auto s = a; s <= b; ++s) out.push_back(s);
    } else {
      out.push_back(to_int(part));
    }
  }
  return out;
}

inline void ensure_output_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + dir + "': " + ec.message());
  const fs::path probe = fs::path(dir) / ".cdbo_write_probe";
  {
    std::ofstream out(probe);
    if (!out) throw IoError("output directory '" + dir + "' is not writable");
  }
  fs::remove(probe, ec);
}

/// Runs `work(i)` for i = 0..count-1 on at most `jobs` threads.
inline void parallel_for(std::size_t count, int jobs, const std::function<void(std::size_t)>& work) {
  const std::size_t workers = std::min<std::size_t>(count, static_cast<std::size_t>(std::max(1, jobs)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) work(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) work(i);
    });
}

// --------------------------------------------------------------------------
// run

struct SeedSetup {
  BilevelProblem problem;
  Vector x0;
  SmoothingConfig smoothing;
};

/// Per-seed problem, start point and smoothing seed. For the minimax
/// experiment the seeded point (x, y) of the GDA baseline gives both x0 and
/// the lower-level start y0; other problems draw x0 uniformly in the box.
inline SeedSetup seed_setup(const RunConfig& cfg, std::int64_t seed) {
  const auto lib = problem_library();
  const auto& entry = find_problem(lib, cfg.problem);
  SeedSetup s{entry.problem, Vector(), cfg.smoothing};
  const auto useed = static_cast<std::uint64_t>(seed);
  if (cfg.problem == "minimax") {
    const Point2 init = gda_initialization(useed);
    s.x0 = Vector::Constant(1, init.x);
    s.problem.y0 = Vector::Constant(1, init.y);
  } else {
    const auto [lo, hi] = entry.problem.feasible_set.bbox();
    rng::Stream st(useed, rng::Domain::initialization, 1, 0);
    s.x0.resize(lo.size());
    for (Eigen::Index i = 0; i < lo.size(); ++i) s.x0[i] = st.uniform(lo[i], hi[i]);
  }
  if (cfg.outer.x0) s.x0 = *cfg.outer.x0;
  s.smoothing.master_seed = rng::splitmix64(cfg.smoothing.master_seed + useed);
  return s;
}

struct SeedReport {
  std::int64_t seed = 0;
  bool ok = false;
  std::string error;
  int error_code = ok;
  std::string verdict;
  double tail_ratio = 0.0;
  bool cycling = false;
  json detail;
};

struct SeedOutcome {
  SeedSetup setup;
  OuterTrace trace;
  double tail_ratio = 0.0;
  bool cycling = false;
  std::optional<std::pair<int, int>> cycle_witness;
};

constexpr double kTailRatioLimit = 5.0;
constexpr int kTailWindow = 500;

inline std::vector<Point2> phase_path(const OuterTrace& trace) {
  std::vector<Point2> pts;
  for (const auto& r : trace.records)
    if (r.y_hat && r.x.size() == 1 && r.y_hat->size() == 1) pts.push_back({r.x[0], (*r.y_hat)[0]});
  return pts;
}

/// Runs SCiNBiO for one seed and computes its diagnostics.
inline SeedOutcome run_seed(const RunConfig& cfg, std::int64_t seed) {
  SeedOutcome out{seed_setup(cfg, seed), {}, 0.0, false, std::nullopt};
  OuterConfig outer = cfg.outer;
  outer.x0 = out.setup.x0;
  out.trace = run_scinbio(out.setup.problem, outer, cfg.lower, out.setup.smoothing);
  out.tail_ratio = tail_stability_ratio(out.trace, kTailWindow);
  const auto path = phase_path(out.trace);
  if (path.size() >= 2) {
    out.cycle_witness = detect_cycle(path, CycleOptions{});
    out.cycling = out.cycle_witness.has_value();
  }
  return out;
}

inline json seed_summary(const RunConfig& cfg, std::int64_t seed, const SeedOutcome& o) {
  json j;
  j["seed"] = seed;
  j["config"] = cfg.resolved;
  j["x0"] = io::to_json(o.trace.x_initial);
  j["y0"] = io::to_json(o.setup.problem.y0);
  j["smoothing_master_seed"] = o.setup.smoothing.master_seed;
  j["x_final"] = io::to_json(o.trace.x_final);
  j["x_out"] = io::to_json(o.trace.x_out);
  j["R"] = o.trace.R ? json(*o.trace.R) : json(nullptr);
  j["iterations"] = o.trace.records.size();
  j["oracle_counts"] = io::to_json(o.trace.total_oracle_counts);
  j["diagnostic_oracle_counts"] = io::to_json(o.trace.phase_oracle_counts);
  j["lipschitz_bound"] = lipschitz_bound(o.setup.problem.f_bar, o.setup.smoothing.xi);
  j["gradient_norm_bound"] = gradient_norm_bound(o.setup.problem.f_bar, o.setup.smoothing.xi);
  j["tail_stability_ratio"] = io::to_json(o.tail_ratio);
  j["cycling"] = o.cycling;
  j["cycle_witness"] = o.cycle_witness ? json{o.cycle_witness->first, o.cycle_witness->second} : json(nullptr);
  int infeasible = 0;
  for (const auto& r : o.trace.records) infeasible += r.infeasible_count;
  j["infeasible_samples"] = infeasible;
  // Lowest hyperfunction value among the last 100 iterates.
  const std::size_t n = o.trace.records.size();
  std::optional<std::size_t> best;
  for (std::size_t i = n > 100 ? n - 100 : 0; i < n; ++i)
    if (o.trace.records[i].phi && (!best || *o.trace.records[i].phi < *o.trace.records[*best].phi)) best = i;
  if (best) {
    const auto& r = o.trace.records[*best];
    j["best_of_last_100"] = json{{"t", r.t}, {"x", io::to_json(r.x)}, {"y_hat", io::to_json(*r.y_hat)},
                                 {"phi", io::to_json(*r.phi)}};
  } else {
    j["best_of_last_100"] = nullptr;
  }
  double wall = 0.0;
  for (const auto& r : o.trace.records) wall += r.wall_time;
  j["wall_time_seconds"] = wall;
  return j;
}

inline std::string seed_verdict(const SeedOutcome& o) {
  return (o.tail_ratio <= kTailRatioLimit && !o.cycling) ? "converged" : "not_converged";
}

inline std::string phase_svg_for(const RunConfig& cfg, const SeedOutcome& o) {
  const auto path = phase_path(o.trace);
  const auto b = io::padded_bounds({&path});
  std::function<std::pair<double, double>(double, double)> field;
  if (cfg.problem == "minimax") field = [](double x, double y) { return minimax_gradient(x, y); };
  return io::phase_svg(field, b[0], b[1], b[2], b[3], {}, path);
}

template <class F>
int guarded(F&& body, std::string& error) {
  try {
    body();
    return ok;
  } catch (const InputError& e) {
    error = e.what();
    return config_error;
  } catch (const IoError& e) {
    error = e.what();
    return io_error;
  } catch (const NumericalError& e) {
    error = e.what();
    return numerical_error;
  } catch (const std::exception& e) {
    error = e.what();
    return numerical_error;
  }
}

inline int cmd_run(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  ensure_output_dir(cfg.output_dir);
  std::vector<SeedReport> reports(cfg.seeds.size());
  std::mutex io_mutex;
  parallel_for(cfg.seeds.size(), cfg.jobs, [&](std::size_t i) {
    SeedReport& rep = reports[i];
    rep.seed = cfg.seeds[i];
    rep.error_code = guarded(
        [&] {
          const SeedOutcome o = run_seed(cfg, rep.seed);
          const fs::path dir(cfg.output_dir);
          const std::string tag = std::to_string(rep.seed);
          if (cfg.emit.count("csv")) io::write_file(dir / ("trace_seed" + tag + ".csv"), io::trace_csv(o.trace, cfg.stride));
          const json summary = seed_summary(cfg, rep.seed, o);
          if (cfg.emit.count("json")) io::write_file(dir / ("summary_seed" + tag + ".json"), summary.dump(2) + "\n");
          if (cfg.emit.count("svg") && o.trace.x_initial.size() == 1 && o.setup.problem.m == 1)
            io::write_file(dir / ("phase_seed" + tag + ".svg"), phase_svg_for(cfg, o));
          rep.ok = true;
          rep.verdict = seed_verdict(o);
          rep.tail_ratio = o.tail_ratio;
          rep.cycling = o.cycling;
          rep.detail = json{{"x_final", summary["x_final"]},
                            {"best_of_last_100", summary["best_of_last_100"]},
                            {"tail_stability_ratio", summary["tail_stability_ratio"]},
                            {"cycling", o.cycling}};
        },
        rep.error);
    if (!rep.ok) {
      rep.verdict = "error";
      std::lock_guard lock(io_mutex);
      err << "seed " << rep.seed << ": " << rep.error << '\n';
    }
  });

  json report;
  report["config"] = cfg.resolved;
  report["seeds"] = json::array();
  std::map<std::string, int> counts{{"converged", 0}, {"not_converged", 0}, {"error", 0}};
  int worst = ok;
  for (const auto& r : reports) {
    json s = {{"seed", r.seed}, {"verdict", r.verdict}};
    if (r.ok) s.update(r.detail);
    else s["error"] = r.error;
    report["seeds"].push_back(s);
    ++counts[r.verdict];
    worst = std::max(worst, r.error_code);
  }
  report["counts"] = counts;
  report["tail_ratio_limit"] = kTailRatioLimit;
  report["tail_window"] = kTailWindow;
  io::write_file(fs::path(cfg.output_dir) / "report.json", report.dump(2) + "\n");
  out << "run: " << counts["converged"] << " converged, " << counts["not_converged"] << " not converged, "
      << counts["error"] << " failed; report at " << (fs::path(cfg.output_dir) / "report.json").string() << '\n';
  return worst;
}

// --------------------------------------------------------------------------
// scan

struct ScanOutcome {
  BifurcationScan scan;
  DimensionEstimate dimension;
  std::vector<std::pair<double, double>> measures;
  double sqrt_bound_constant = 0.0;
  bool sqrt_bound_holds = false;
  std::map<std::string, int> fold_classes;
  /// min |dg/dy| outside the largest delta-tube, r = 5% of the y window.
  GradientFloor gradient_floor;
  double floor_delta = 0.0, floor_r = 0.0;
};

inline ScanOutcome run_scan(const RunConfig& cfg) {
  if (cfg.problem != "fold" && cfg.problem != "quartic")
    throw InputError("scan: problem must be fold or quartic (got '" + cfg.problem + "')");
  const auto lib = problem_library();
  const auto& problem = find_problem(lib, cfg.problem).problem;
  ScanOutcome o;
  o.scan = scan_bifurcation_set(problem, cfg.scan.grid_resolution, cfg.scan.y_range, cfg.scan.y_resolution);
  const auto [lo, hi] = problem.feasible_set.bbox();
  const double span = (hi - lo).maxCoeff();
  const std::vector<double> rel{0.1, 0.05, 0.025, 0.0125};
  std::vector<double> radii = cfg.scan.radii, deltas = cfg.scan.deltas;
  if (radii.empty())
    for (double r : rel) radii.push_back(r * span);
  if (deltas.empty())
    for (double r : rel) deltas.push_back(r * span);
  const auto centers = o.scan.marked_centers();
  if (!centers.empty()) {
    o.dimension = box_counting_dimension(centers, radii);
    o.measures = neighborhood_measure(o.scan, deltas);
    // C fitted at the largest delta, then checked at every delta.
    auto largest = std::max_element(o.measures.begin(), o.measures.end());
    if (largest->first > 0.0) {
      o.sqrt_bound_constant = largest->second / std::sqrt(largest->first);
      o.sqrt_bound_holds = true;
      for (const auto& [d, m] : o.measures)
        if (d > 0.0 && m > o.sqrt_bound_constant * std::sqrt(d) * (1.0 + 1e-12)) o.sqrt_bound_holds = false;
    }
    o.floor_delta = *std::max_element(deltas.begin(), deltas.end());
    o.floor_r = 0.05 * (cfg.scan.y_range.second - cfg.scan.y_range.first);
    o.gradient_floor = min_gradient_outside_tubes(problem, o.scan, o.floor_delta, o.floor_r, cfg.scan.y_range,
                                                  std::min(cfg.scan.y_resolution, 400));
  } else {
    o.dimension.radii = radii;
    o.dimension.determined = false;
    o.dimension.d_hat = std::numeric_limits<double>::quiet_NaN();
  }
  for (auto& rec : o.scan.branch_points) {
    if (!rec.degenerate) continue;
    rec.fold_class = check_fold_conditions(problem, rec);
    ++o.fold_classes[to_string(rec.fold_class)];
  }
  return o;
}

inline json scan_json(const RunConfig& cfg, const ScanOutcome& o) {
  json j;
  j["config"] = cfg.resolved;
  j["problem"] = cfg.problem;
  j["grid_resolution"] = o.scan.resolution;
  j["marked_cells"] = o.scan.marked_count();
  j["branch_points"] = o.scan.branch_points.size();
  json d;
  d["radii"] = o.dimension.radii;
  d["counts"] = o.dimension.counts;
  d["slope"] = io::to_json(o.dimension.slope);
  d["d_hat"] = io::to_json(o.dimension.d_hat);
  d["r_squared_fit"] = io::to_json(o.dimension.r_squared_fit);
  d["determined"] = o.dimension.determined;
  j["dimension"] = d;
  json m = json::array();
  for (const auto& [delta, measure] : o.measures) m.push_back(json{{"delta", delta}, {"measure", measure}});
  j["neighborhood_measure"] = m;
  j["sqrt_bound_constant"] = io::to_json(o.sqrt_bound_constant);
  j["sqrt_bound_holds"] = o.sqrt_bound_holds;
  j["fold_classes"] = o.fold_classes;
  j["gradient_floor"] = json{{"delta", o.floor_delta},
                             {"r", o.floor_r},
                             {"min_grad_norm", io::to_json(o.gradient_floor.value)},
                             {"cells", o.gradient_floor.cells_used}};
  return j;
}

inline int cmd_scan(const RunConfig& cfg, std::ostream& out, std::ostream&) {
  const ScanOutcome o = run_scan(cfg);
  ensure_output_dir(cfg.output_dir);
  const fs::path dir(cfg.output_dir);
  if (cfg.emit.count("csv")) io::write_file(dir / ("scan_" + cfg.problem + ".csv"), io::scan_csv(o.scan));
  if (cfg.emit.count("svg")) io::write_file(dir / ("scan_" + cfg.problem + ".svg"), io::scan_svg(o.scan));
  const json j = scan_json(cfg, o);
  io::write_file(dir / ("dimension_" + cfg.problem + ".json"), j.dump(2) + "\n");
  out << "scan: " << o.scan.marked_count() << " marked cells, d_hat = "
      << (o.dimension.determined ? io::fmt(o.dimension.d_hat) : std::string("undetermined")) << '\n';
  return ok;
}

// --------------------------------------------------------------------------
// gda

inline bool gda_stable(const GdaTrace& tr, const GdaSettings& s) {
  return tr.verdict == GdaVerdict::converged ||
         (tr.verdict == GdaVerdict::budget_exhausted && tr.final_displacement(s.stable_window) <= s.stable_displacement);
}

inline int cmd_gda(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  if (cfg.problem != "minimax") throw InputError("gda: problem must be minimax (got '" + cfg.problem + "')");
  ensure_output_dir(cfg.output_dir);
  struct Row {
    json j;
    std::string verdict;
    bool stable = false;
    int code = ok;
  };
  std::vector<Row> rows(cfg.seeds.size());
  std::mutex io_mutex;
  parallel_for(cfg.seeds.size(), cfg.jobs, [&](std::size_t i) {
    const auto seed = cfg.seeds[i];
    Row& row = rows[i];
    const Point2 init = gda_initialization(static_cast<std::uint64_t>(seed));
    row.j = json{{"seed", seed}, {"init", {init.x, init.y}}};
    std::string error;
    row.code = guarded(
        [&] {
          const GdaTrace tr = run_gda_minimax(init, cfg.gda.options);
          row.verdict = to_string(tr.verdict);
          row.stable = gda_stable(tr, cfg.gda);
          row.j["verdict"] = row.verdict;
          row.j["stable"] = row.stable;
          row.j["steps_taken"] = tr.steps_taken;
          row.j["final"] = {tr.points.back().x, tr.points.back().y};
          row.j["final_displacement"] = tr.final_displacement(cfg.gda.stable_window);
          row.j["cycle_witness"] =
              tr.cycle_witness ? json{tr.steps[static_cast<std::size_t>(tr.cycle_witness->first)],
                                      tr.steps[static_cast<std::size_t>(tr.cycle_witness->second)]}
                               : json(nullptr);
          const fs::path dir(cfg.output_dir);
          const std::string tag = std::to_string(seed);
          if (cfg.emit.count("csv")) {
            GdaTrace thin = tr;
            if (cfg.stride > 1) {
              thin.points.clear();
              thin.steps.clear();
              for (std::size_t k = 0; k < tr.points.size(); ++k)
                if (k % static_cast<std::size_t>(cfg.stride) == 0 || k + 1 == tr.points.size()) {
                  thin.points.push_back(tr.points[k]);
                  thin.steps.push_back(tr.steps[k]);
                }
            }
            io::write_file(dir / ("gda_seed" + tag + ".csv"), io::gda_csv(thin));
          }
          if (cfg.emit.count("svg")) {
            const auto b = io::padded_bounds({&tr.points});
            io::write_file(dir / ("gda_seed" + tag + ".svg"),
                           io::phase_svg([](double x, double y) { return minimax_gradient(x, y); }, b[0], b[1], b[2],
                                         b[3], tr.points, {}));
          }
        },
        error);
    if (row.code != ok) {
      row.verdict = "error";
      row.j["verdict"] = "error";
      row.j["error"] = error;
      std::lock_guard lock(io_mutex);
      err << "seed " << seed << ": " << error << '\n';
    }
  });
  json report;
  report["config"] = cfg.resolved;
  report["seeds"] = json::array();
  std::map<std::string, int> counts{{"converged", 0}, {"cycling", 0}, {"budget_exhausted", 0}, {"error", 0}};
  int stable = 0, worst = ok;
  for (const auto& r : rows) {
    report["seeds"].push_back(r.j);
    ++counts[r.verdict];
    stable += r.stable ? 1 : 0;
    worst = std::max(worst, r.code);
  }
  report["counts"] = counts;
  report["stable"] = stable;
  io::write_file(fs::path(cfg.output_dir) / "gda_report.json", report.dump(2) + "\n");
  out << "gda: " << counts["cycling"] << " cycling, " << counts["converged"] << " converged, "
      << counts["budget_exhausted"] << " budget exhausted (" << stable << " stable), " << counts["error"]
      << " failed\n";
  return worst;
}

// --------------------------------------------------------------------------
// estimate

inline json run_estimate(const RunConfig& cfg) {
  const auto lib = problem_library();
  const auto& problem = find_problem(lib, cfg.problem).problem;
  const auto [lo, hi] = problem.feasible_set.bbox();
  const Vector x = cfg.estimate.x ? *cfg.estimate.x : Vector(0.5 * (lo + hi));
  if (!problem.feasible_set.contains(x)) throw InputError("estimate.x: point is outside the feasible set");
  LowerSolverConfig lower = cfg.lower;
  lower.K = cfg.outer.schedules.K(0);
  const int N = cfg.estimate.N;
  const auto est = estimate_hypergradient(problem, x, N, cfg.smoothing, lower, 0);
  const int B = cfg.estimate.batches;
  Vector mean = Vector::Zero(x.size()), sq = Vector::Zero(x.size());
  for (int b = 1; b <= B; ++b) {
    const auto e = estimate_hypergradient(problem, x, N, cfg.smoothing, lower, static_cast<std::uint64_t>(b));
    mean += e.value;
    sq += e.value.cwiseProduct(e.value);
  }
  mean /= B;
  const Vector var = ((sq / B - mean.cwiseProduct(mean)) * (B / (B - 1.0))).cwiseMax(0.0);
  const Vector batch_se = (var / B).cwiseSqrt();
  const double bound = gradient_norm_bound(problem.f_bar, cfg.smoothing.xi);
  json j;
  j["config"] = cfg.resolved;
  j["x"] = io::to_json(x);
  j["estimate"] = io::to_json(est.value);
  j["norm"] = est.value.norm();
  j["N"] = N;
  j["infeasible_count"] = est.infeasible_count;
  j["standard_error"] = io::to_json(est.standard_error);
  j["batches"] = B;
  j["batch_mean"] = io::to_json(mean);
  j["batch_standard_error"] = io::to_json(batch_se);
  j["f_bar"] = problem.f_bar;
  j["xi"] = cfg.smoothing.xi;
  j["bound"] = bound;
  j["within_bound"] = mean.norm() <= bound + 3.0 * batch_se.norm();
  j["oracle_counts"] = io::to_json(est.oracle_counts);
  return j;
}

inline int cmd_estimate(const RunConfig& cfg, std::ostream& out, std::ostream&) {
  out << run_estimate(cfg).dump(2) << '\n';
  return ok;
}

// --------------------------------------------------------------------------
// entry point

/// Parses argv, dispatches the subcommand and maps errors to exit codes.
inline int main_entry(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"cdbo: bilevel optimization with algorithm-defined lower-level responses"};
  app.require_subcommand(1);

  struct Flags {
    std::optional<std::string> config, problem, seed, out, output_rule, emit;
    std::optional<int> stride, jobs, T, N, K, threads, resolution, y_resolution, max_steps, samples, batches,
        audit_samples;
    std::optional<double> beta, xi, eta, M, gda_step;
    std::optional<std::int64_t> master_seed;
    std::vector<double> x;
    bool audit = false;
  } fl;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", fl.config, "JSON config file");
    sub->add_option("--problem", fl.problem, "minimax | double-well | fold | quartic");
    sub->add_option("--seed", fl.seed, "seed list, e.g. 0,3,7 or 0-14");
    sub->add_option("--out", fl.out, "output directory");
    sub->add_option("--stride", fl.stride, "write every N-th trace row");
    sub->add_option("--jobs", fl.jobs, "seeds run concurrently");
    sub->add_option("--emit", fl.emit, "comma-separated subset of csv,json,svg");
    sub->add_option("--master-seed", fl.master_seed, "smoothing master seed");
    sub->add_option("--xi", fl.xi, "smoothing bandwidth");
    sub->add_option("--threads", fl.threads, "threads per estimate");
    sub->add_option("--eta", fl.eta, "lower-level gradient step");
    sub->add_option("--M", fl.M, "cubic regularization");
    sub->add_option("--K", fl.K, "lower-level iterations (constant schedule)");
  };
  CLI::App* run = app.add_subcommand("run", "SCiNBiO outer loop over seeds");
  common(run);
  run->add_option("--T", fl.T, "outer iterations");
  run->add_option("--beta", fl.beta, "outer step size (constant)");
  run->add_option("--N", fl.N, "samples per estimate (constant schedule)");
  run->add_option("--output-rule", fl.output_rule, "last | random_index | best_mapping");
  run->add_flag("--audit", fl.audit, "re-estimate the mapping norm with 1000 fresh samples per iteration");
  run->add_option("--audit-samples", fl.audit_samples, "samples for --audit");
  CLI::App* scan = app.add_subcommand("scan", "bifurcation-set scan of a two-parameter family");
  common(scan);
  scan->add_option("--resolution", fl.resolution, "grid cells per axis");
  scan->add_option("--y-resolution", fl.y_resolution, "root-search grid points");
  CLI::App* gda = app.add_subcommand("gda", "gradient descent-ascent baseline");
  common(gda);
  gda->add_option("--max-steps", fl.max_steps, "GDA steps");
  gda->add_option("--step", fl.gda_step, "GDA step size");
  CLI::App* estimate = app.add_subcommand("estimate", "one smoothed hypergradient estimate");
  common(estimate);
  estimate->add_option("--x", fl.x, "point to estimate at")->expected(1, -1);
  estimate->add_option("--samples", fl.samples, "samples N");
  estimate->add_option("--batches", fl.batches, "repeated batches for the standard error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return ok;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return ok;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return config_error;
  }

  std::string error;
  int rc = ok;
  const int code = guarded(
      [&] {
        json ov = json::object();
        if (fl.problem) ov["problem"] = *fl.problem;
        if (fl.seed) ov["seeds"] = parse_seed_list(*fl.seed);
        if (fl.out) ov["output_dir"] = *fl.out;
        if (fl.stride) ov["stride"] = *fl.stride;
        if (fl.jobs) ov["jobs"] = *fl.jobs;
        if (fl.emit) {
          json e = json::array();
          std::stringstream ss(*fl.emit);
          std::string part;
          while (std::getline(ss, part, ','))
            if (!part.empty()) e.push_back(part);
          ov["emit"] = e;
        }
        if (fl.master_seed) ov["smoothing"]["master_seed"] = *fl.master_seed;
        if (fl.xi) ov["smoothing"]["xi"] = *fl.xi;
        if (fl.threads) ov["smoothing"]["threads"] = *fl.threads;
        if (fl.eta) ov["lower"]["eta"] = *fl.eta;
        if (fl.M) ov["lower"]["M"] = *fl.M;
        if (fl.K) ov["outer"]["K"] = *fl.K;
        if (fl.T) ov["outer"]["T"] = *fl.T;
        if (fl.beta) ov["outer"]["beta"] = *fl.beta;
        if (fl.N) ov["outer"]["N"] = *fl.N;
        if (fl.output_rule) ov["outer"]["output_rule"] = *fl.output_rule;
        if (fl.audit_samples) ov["outer"]["audit_samples"] = *fl.audit_samples;
        else if (fl.audit) ov["outer"]["audit_samples"] = 1000;
        if (fl.resolution) ov["scan"]["grid_resolution"] = *fl.resolution;
        if (fl.y_resolution) ov["scan"]["y_resolution"] = *fl.y_resolution;
        if (fl.max_steps) ov["gda"]["max_steps"] = *fl.max_steps;
        if (fl.gda_step) ov["gda"]["step"] = *fl.gda_step;
        if (!fl.x.empty()) ov["estimate"]["x"] = fl.x;
        if (fl.samples) ov["estimate"]["N"] = *fl.samples;
        if (fl.batches) ov["estimate"]["batches"] = *fl.batches;

        const RunConfig cfg = resolve_config(fl.config, ov);
        if (run->parsed()) rc = cmd_run(cfg, out, err);
        else if (scan->parsed()) rc = cmd_scan(cfg, out, err);
        else if (gda->parsed()) rc = cmd_gda(cfg, out, err);
        else if (estimate->parsed()) rc = cmd_estimate(cfg, out, err);
      },
      error);
  if (code != ok) {
    err << "error: " << error << '\n';
    return code;
  }
  return rc;
}

}  // namespace cdbo::cli
