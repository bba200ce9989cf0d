#pragma once

// CSV, JSON and SVG writers for traces, scans and trajectories.

#include "cdbo/baselines.hpp"
#include "cdbo/core.hpp"
#include "cdbo/geometry.hpp"
#include "cdbo/scinbio.hpp"

#include <json.hpp>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

namespace cdbo::io {

using json = nlohmann::json;

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << content;
  out.flush();
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline json to_json(const Vector& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (std::isfinite(v[i])) a.push_back(v[i]);
    else a.push_back(nullptr);
  }
  return a;
}

inline json to_json(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline json to_json(const OracleCounts& c) {
  return json{{"f", c.f}, {"g", c.g}, {"grad", c.grad}, {"hess", c.hess}};
}

constexpr const char* kTraceVersion = "# cdbo trace v1";

/// Header row of the trace CSV for dimension n.
inline std::string trace_header(Eigen::Index n, bool phase, Eigen::Index m, bool audit = false) {
  std::string h = "t";
  for (Eigen::Index i = 0; i < n; ++i) h += ",x" + std::to_string(i);
  for (Eigen::Index i = 0; i < n; ++i) h += ",est" + std::to_string(i);
  h += ",mapping_norm,N_t,K_t,infeasible_count";
  if (phase) {
    for (Eigen::Index i = 0; i < m; ++i) h += ",yhat" + std::to_string(i);
    h += ",phi";
  }
  if (audit) h += ",audit_mapping_norm";
  return h;
}

/// Trace CSV: a version comment, the header, then every stride-th row (the
/// last row is always written).
inline std::string trace_csv(const OuterTrace& trace, int stride = 1) {
  require(stride >= 1, "stride must be >= 1");
  const Eigen::Index n = trace.x_initial.size();
  const bool phase = !trace.records.empty() && trace.records.front().y_hat.has_value();
  const Eigen::Index m = phase ? trace.records.front().y_hat->size() : 0;
  std::ostringstream os;
  const bool audit = !trace.records.empty() && trace.records.front().audit_mapping_norm.has_value();
  os << kTraceVersion << '\n' << trace_header(n, phase, m, audit) << '\n';
  const std::size_t rows = trace.records.size();
  for (std::size_t i = 0; i < rows; ++i) {
    if (i % static_cast<std::size_t>(stride) != 0 && i + 1 != rows) continue;
    const auto& r = trace.records[i];
    os << r.t;
    for (Eigen::Index j = 0; j < n; ++j) os << ',' << fmt(r.x[j]);
    for (Eigen::Index j = 0; j < n; ++j) os << ',' << fmt(r.estimate[j]);
    os << ',' << fmt(r.mapping_norm) << ',' << r.N << ',' << r.K << ',' << r.infeasible_count;
    if (phase) {
      for (Eigen::Index j = 0; j < m; ++j) os << ',' << fmt((*r.y_hat)[j]);
      os << ',' << fmt(r.phi.value_or(std::numeric_limits<double>::quiet_NaN()));
    }
    if (audit) os << ',' << fmt(r.audit_mapping_norm.value_or(std::numeric_limits<double>::quiet_NaN()));
    os << '\n';
  }
  return os.str();
}

inline std::string gda_csv(const GdaTrace& tr) {
  std::ostringstream os;
  os << "# cdbo gda v1\nk,x,y\n";
  for (std::size_t i = 0; i < tr.points.size(); ++i)
    os << tr.steps[i] << ',' << fmt(tr.points[i].x) << ',' << fmt(tr.points[i].y) << '\n';
  return os.str();
}

inline std::string scan_csv(const BifurcationScan& scan) {
  std::ostringstream os;
  os << "# cdbo scan v1\nx1,x2,marked,nearest_lambda_min_abs\n";
  for (int i2 = 0; i2 < scan.resolution; ++i2) {
    for (int i1 = 0; i1 < scan.resolution; ++i1) {
      const Vector c = scan.cell_center(i1, i2);
      const double lam = scan.nearest_lambda[static_cast<std::size_t>(i2 * scan.resolution + i1)];
      os << fmt(c[0]) << ',' << fmt(c[1]) << ',' << (scan.marked(i1, i2) ? 1 : 0) << ','
         << (std::isfinite(lam) ? fmt(lam) : std::string("inf")) << '\n';
    }
  }
  return os.str();
}

/// Minimal SVG 1.1 canvas mapping a world rectangle onto a pixel viewport
/// (y axis pointing up).
class SvgCanvas {
 public:
  SvgCanvas(double x_lo, double x_hi, double y_lo, double y_hi, int width = 640, int height = 640)
      : x_lo_(x_lo), x_hi_(x_hi), y_lo_(y_lo), y_hi_(y_hi), w_(width), h_(height) {
    require(x_hi > x_lo && y_hi > y_lo, "SvgCanvas: empty world rectangle");
  }

  double px(double x) const { return kMargin + (x - x_lo_) / (x_hi_ - x_lo_) * (w_ - 2 * kMargin); }
  double py(double y) const { return h_ - kMargin - (y - y_lo_) / (y_hi_ - y_lo_) * (h_ - 2 * kMargin); }

  void rect(double x0, double y0, double x1, double y1, const std::string& fill) {
    body_ << "<rect x=\"" << num(px(x0)) << "\" y=\"" << num(py(y1)) << "\" width=\"" << num(px(x1) - px(x0))
          << "\" height=\"" << num(py(y0) - py(y1)) << "\" fill=\"" << fill << "\"/>\n";
  }
  void line(double x0, double y0, double x1, double y1, const std::string& stroke, double width = 1.0) {
    body_ << "<line x1=\"" << num(px(x0)) << "\" y1=\"" << num(py(y0)) << "\" x2=\"" << num(px(x1)) << "\" y2=\""
          << num(py(y1)) << "\" stroke=\"" << stroke << "\" stroke-width=\"" << num(width) << "\"/>\n";
  }
  void circle(double x, double y, double r_px, const std::string& fill) {
    body_ << "<circle cx=\"" << num(px(x)) << "\" cy=\"" << num(py(y)) << "\" r=\"" << num(r_px) << "\" fill=\""
          << fill << "\"/>\n";
  }
  void polyline(const std::vector<Point2>& pts, const std::string& stroke, double width = 1.0) {
    if (pts.empty()) return;
    body_ << "<polyline fill=\"none\" stroke=\"" << stroke << "\" stroke-width=\"" << num(width) << "\" points=\"";
    for (const auto& p : pts) body_ << num(px(p.x)) << ',' << num(py(p.y)) << ' ';
    body_ << "\"/>\n";
  }
  /// Arrow of fixed pixel length along (dx, dy) from (x, y).
  void arrow(double x, double y, double dx, double dy, double len_px, const std::string& stroke) {
    // Direction in pixel space (y flips).
    const double sx = dx / (x_hi_ - x_lo_) * (w_ - 2 * kMargin), sy = -dy / (y_hi_ - y_lo_) * (h_ - 2 * kMargin);
    const double norm = std::hypot(sx, sy);
    if (norm == 0.0) return;
    const double ux = sx / norm, uy = sy / norm;
    const double x0 = px(x), y0 = py(y), x1 = x0 + len_px * ux, y1 = y0 + len_px * uy;
    const double hx = 0.3 * len_px, hy = 0.15 * len_px;
    body_ << "<path d=\"M" << num(x0) << ',' << num(y0) << " L" << num(x1) << ',' << num(y1) << " M"
          << num(x1 - hx * ux + hy * uy) << ',' << num(y1 - hx * uy - hy * ux) << " L" << num(x1) << ',' << num(y1)
          << " L" << num(x1 - hx * ux - hy * uy) << ',' << num(y1 - hx * uy + hy * ux) << "\" stroke=\"" << stroke
          << "\" fill=\"none\" stroke-width=\"1\"/>\n";
  }
  void text(double x, double y, const std::string& s, int size = 12) {
    body_ << "<text x=\"" << num(px(x)) << "\" y=\"" << num(py(y)) << "\" font-family=\"sans-serif\" font-size=\""
          << size << "\">" << s << "</text>\n";
  }
  void frame() {
    body_ << "<rect x=\"" << kMargin << "\" y=\"" << kMargin << "\" width=\"" << w_ - 2 * kMargin << "\" height=\""
          << h_ - 2 * kMargin << "\" fill=\"none\" stroke=\"black\"/>\n";
  }

  std::string str() const {
    std::ostringstream os;
    os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
       << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << w_ << "\" height=\"" << h_
       << "\" viewBox=\"0 0 " << w_ << ' ' << h_ << "\">\n"
       << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
       << body_.str() << "</svg>\n";
    return os.str();
  }

 private:
  static constexpr int kMargin = 30;
  static std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
  }
  double x_lo_, x_hi_, y_lo_, y_hi_;
  int w_, h_;
  std::ostringstream body_;
};

/// Marked scan cells: isolated cells (no marked 8-neighbour) in red as point
/// strata candidates, the rest in blue; degenerate branch points as dots.
inline std::string scan_svg(const BifurcationScan& scan) {
  SvgCanvas c(scan.lo[0], scan.hi[0], scan.lo[1], scan.hi[1]);
  const int R = scan.resolution;
  for (int i2 = 0; i2 < R; ++i2) {
    for (int i1 = 0; i1 < R; ++i1) {
      if (!scan.marked(i1, i2)) continue;
      bool isolated = true;
      for (int d2 = -1; d2 <= 1 && isolated; ++d2)
        for (int d1 = -1; d1 <= 1; ++d1) {
          const int j1 = i1 + d1, j2 = i2 + d2;
          if ((d1 != 0 || d2 != 0) && j1 >= 0 && j2 >= 0 && j1 < R && j2 < R && scan.marked(j1, j2)) {
            isolated = false;
            break;
          }
        }
      const double x0 = scan.lo[0] + i1 * scan.cell_width(0), y0 = scan.lo[1] + i2 * scan.cell_width(1);
      c.rect(x0, y0, x0 + scan.cell_width(0), y0 + scan.cell_width(1), isolated ? "red" : "blue");
    }
  }
  for (const auto& rec : scan.branch_points)
    if (rec.degenerate) c.circle(rec.x[0], rec.x[1], 0.8, "black");
  c.frame();
  return c.str();
}

/// Descent-ascent field arrows (-df/dx, df/dy) on a coarse grid, with
/// optional GDA and SCiNBiO paths on top.
inline std::string phase_svg(const std::function<std::pair<double, double>(double, double)>& field, double x_lo,
                             double x_hi, double y_lo, double y_hi, const std::vector<Point2>& gda_path,
                             const std::vector<Point2>& scinbio_path) {
  SvgCanvas c(x_lo, x_hi, y_lo, y_hi);
  if (field) {
    constexpr int kArrows = 20;
    for (int i = 0; i < kArrows; ++i) {
      for (int j = 0; j < kArrows; ++j) {
        const double x = x_lo + (i + 0.5) * (x_hi - x_lo) / kArrows;
        const double y = y_lo + (j + 0.5) * (y_hi - y_lo) / kArrows;
        const auto [fx, fy] = field(x, y);
        c.arrow(x, y, -fx, fy, 10.0, "#999999");
      }
    }
  }
  c.polyline(gda_path, "red", 1.0);
  c.polyline(scinbio_path, "blue", 1.5);
  if (!gda_path.empty()) c.circle(gda_path.front().x, gda_path.front().y, 3.0, "red");
  if (!scinbio_path.empty()) {
    c.circle(scinbio_path.front().x, scinbio_path.front().y, 3.0, "blue");
    c.circle(scinbio_path.back().x, scinbio_path.back().y, 3.0, "black");
  }
  c.frame();
  return c.str();
}

/// Bounding rectangle of a set of paths, padded by 10% (at least `min_pad`).
inline std::array<double, 4> padded_bounds(const std::vector<const std::vector<Point2>*>& paths, double min_pad = 0.5) {
  double xl = std::numeric_limits<double>::infinity(), xh = -xl, yl = xl, yh = -xl;
  for (const auto* p : paths)
    for (const auto& q : *p) {
      xl = std::min(xl, q.x);
      xh = std::max(xh, q.x);
      yl = std::min(yl, q.y);
      yh = std::max(yh, q.y);
    }
  if (!std::isfinite(xl)) return {-1.0, 1.0, -1.0, 1.0};
  const double px = std::max(min_pad, 0.1 * (xh - xl)), py = std::max(min_pad, 0.1 * (yh - yl));
  return {xl - px, xh + px, yl - py, yh + py};
}

}  // namespace cdbo::io
