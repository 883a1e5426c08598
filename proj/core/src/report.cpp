#include "qlab/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "qlab/error.hpp"
#include "qlab/metrics_csv.hpp"

namespace qlab::report {

namespace fs = std::filesystem;

namespace {

constexpr double kWidth = 760, kHeight = 460;
constexpr double kLeft = 80, kRight = 90, kTop = 50, kBottom = 60;

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string esc(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::string tick_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

struct Range {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  void add(double v) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  bool empty() const { return !(lo <= hi); }
  void pad(double frac) {
    if (hi == lo) {
      const double d = lo == 0.0 ? 1.0 : std::abs(lo) * 0.1;
      lo -= d;
      hi += d;
    } else {
      const double d = (hi - lo) * frac;
      lo -= d;
      hi += d;
    }
  }
};

std::vector<Point> drawable(const std::vector<Point>& pts, bool log_x) {
  std::vector<Point> out;
  for (const auto& p : pts) {
    if (!std::isfinite(p.x) || !std::isfinite(p.y)) continue;
    if (log_x && p.x <= 0.0) continue;
    out.push_back(p);
  }
  return out;
}

std::vector<double> linear_ticks(const Range& r) {
  const double span = r.hi - r.lo;
  const double raw = span / 5.0;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  double step = mag;
  for (double m : {1.0, 2.0, 5.0, 10.0}) {
    if (raw <= m * mag) {
      step = m * mag;
      break;
    }
  }
  std::vector<double> out;
  for (double v = std::ceil(r.lo / step) * step; v <= r.hi + 1e-9 * step; v += step) out.push_back(v);
  return out;
}

}  // namespace

std::string render_svg(const std::vector<Series>& series, const PlotSpec& spec) {
  Range xr, yr, lr_range;
  std::vector<std::vector<Point>> pts, lrs;
  for (const auto& s : series) {
    pts.push_back(drawable(s.points, spec.log_x));
    lrs.push_back(spec.lr_overlay ? drawable(s.lr, spec.log_x) : std::vector<Point>{});
    for (const auto& p : pts.back()) {
      xr.add(spec.log_x ? std::log10(p.x) : p.x);
      yr.add(p.y);
    }
    for (const auto& p : lrs.back()) lr_range.add(p.y);
  }
  if (xr.empty()) throw ContractViolation("render_svg: nothing to draw for " + spec.metric);
  if (xr.hi == xr.lo) xr.pad(0.0);
  yr.pad(0.05);
  const bool has_lr = !lr_range.empty();
  if (has_lr) {
    lr_range.lo = std::min(0.0, lr_range.lo);
    if (lr_range.hi == lr_range.lo) lr_range.hi = lr_range.lo + 1.0;
  }

  const double pw = kWidth - kLeft - kRight, ph = kHeight - kTop - kBottom;
  auto sx = [&](double x) {
    const double v = spec.log_x ? std::log10(x) : x;
    return kLeft + (v - xr.lo) / (xr.hi - xr.lo) * pw;
  };
  auto sy = [&](double y) { return kTop + ph - (y - yr.lo) / (yr.hi - yr.lo) * ph; };
  auto sy_lr = [&](double y) { return kTop + ph - (y - lr_range.lo) / (lr_range.hi - lr_range.lo) * ph; };

  std::ostringstream o;
  o << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
    << "\" viewBox=\"0 0 " << kWidth << " " << kHeight << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect x=\"0\" y=\"0\" width=\"" << kWidth << "\" height=\"" << kHeight << "\" fill=\"white\"/>\n";
  const std::string title = spec.title.empty() ? spec.metric : spec.title;
  o << "<text x=\"" << num(kWidth / 2) << "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">"
    << esc(title) << "</text>\n";

  // Axes.
  o << "<g class=\"axes\" stroke=\"black\" fill=\"none\">\n";
  o << "<line x1=\"" << kLeft << "\" y1=\"" << kTop + ph << "\" x2=\"" << kLeft + pw << "\" y2=\""
    << kTop + ph << "\"/>\n";
  o << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << kTop + ph
    << "\"/>\n";
  if (has_lr) {
    o << "<line x1=\"" << kLeft + pw << "\" y1=\"" << kTop << "\" x2=\"" << kLeft + pw << "\" y2=\""
      << kTop + ph << "\" stroke-dasharray=\"2,3\"/>\n";
  }
  o << "</g>\n";

  o << "<g class=\"ticks\" fill=\"black\">\n";
  if (spec.log_x) {
    for (double e = std::ceil(xr.lo); e <= std::floor(xr.hi); e += 1.0) {
      const double x = kLeft + (e - xr.lo) / (xr.hi - xr.lo) * pw;
      o << "<line x1=\"" << num(x) << "\" y1=\"" << kTop + ph << "\" x2=\"" << num(x) << "\" y2=\""
        << kTop + ph + 5 << "\" stroke=\"black\"/>";
      o << "<text x=\"" << num(x) << "\" y=\"" << kTop + ph + 18 << "\" text-anchor=\"middle\">"
        << tick_label(std::pow(10.0, e)) << "</text>\n";
    }
  } else {
    for (double v : linear_ticks(xr)) {
      const double x = sx(v);
      o << "<line x1=\"" << num(x) << "\" y1=\"" << kTop + ph << "\" x2=\"" << num(x) << "\" y2=\""
        << kTop + ph + 5 << "\" stroke=\"black\"/>";
      o << "<text x=\"" << num(x) << "\" y=\"" << kTop + ph + 18 << "\" text-anchor=\"middle\">"
        << tick_label(v) << "</text>\n";
    }
  }
  for (double v : linear_ticks(yr)) {
    const double y = sy(v);
    o << "<line x1=\"" << kLeft - 5 << "\" y1=\"" << num(y) << "\" x2=\"" << kLeft << "\" y2=\""
      << num(y) << "\" stroke=\"black\"/>";
    o << "<text x=\"" << kLeft - 8 << "\" y=\"" << num(y + 4) << "\" text-anchor=\"end\">"
      << tick_label(v) << "</text>\n";
  }
  if (has_lr) {
    for (double v : linear_ticks(lr_range)) {
      const double y = sy_lr(v);
      o << "<text x=\"" << kLeft + pw + 8 << "\" y=\"" << num(y + 4) << "\" text-anchor=\"start\" fill=\"#555\">"
        << tick_label(v) << "</text>\n";
    }
  }
  o << "</g>\n";

  o << "<text class=\"xlabel\" x=\"" << num(kLeft + pw / 2) << "\" y=\"" << kHeight - 15
    << "\" text-anchor=\"middle\">" << esc(spec.x) << (spec.log_x ? " (log)" : "") << "</text>\n";
  o << "<text class=\"ylabel\" transform=\"translate(18," << num(kTop + ph / 2)
    << ") rotate(-90)\" text-anchor=\"middle\">" << esc(spec.metric) << "</text>\n";
  if (has_lr) {
    o << "<text class=\"lrlabel\" transform=\"translate(" << num(kWidth - 14) << "," << num(kTop + ph / 2)
      << ") rotate(90)\" text-anchor=\"middle\" fill=\"#555\">learning rate (dotted)</text>\n";
  }

  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* color = kPalette[i % std::size(kPalette)];
    if (!pts[i].empty()) {
      o << "<polyline class=\"series\" fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.8\" points=\"";
      for (const auto& p : pts[i]) o << num(sx(p.x)) << "," << num(sy(p.y)) << " ";
      o << "\"/>\n";
    }
    if (!lrs[i].empty()) {
      o << "<polyline class=\"lr\" fill=\"none\" stroke=\"" << color
        << "\" stroke-width=\"1\" stroke-dasharray=\"2,3\" points=\"";
      for (const auto& p : lrs[i]) o << num(sx(p.x)) << "," << num(sy_lr(p.y)) << " ";
      o << "\"/>\n";
    }
  }

  o << "<g class=\"legend\">\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const double y = kTop + 10 + 16.0 * static_cast<double>(i);
    o << "<line x1=\"" << kLeft + 10 << "\" y1=\"" << num(y) << "\" x2=\"" << kLeft + 30 << "\" y2=\""
      << num(y) << "\" stroke=\"" << kPalette[i % std::size(kPalette)] << "\" stroke-width=\"2\"/>";
    o << "<text x=\"" << kLeft + 36 << "\" y=\"" << num(y + 4) << "\">" << esc(series[i].label) << "</text>\n";
  }
  o << "</g>\n</svg>\n";
  return o.str();
}

ReportOutput cmd_report(const std::vector<fs::path>& inputs, const PlotSpec& spec,
                        const fs::path& out_stem) {
  if (inputs.empty()) throw ConfigError("report: no inputs");
  if (spec.metric.empty()) throw ConfigError("report: no metric selected");

  // Validate everything before writing anything.
  std::vector<csv::Table> tables;
  for (const auto& in : inputs) {
    const fs::path p = fs::is_directory(in) ? in / "metrics.csv" : in;
    csv::Table t = csv::read_table(p);
    if (t.rows.empty()) throw FormatError(p.string() + ": CSV has no rows");
    t.column("run_id");
    t.column(spec.x);
    t.column(spec.metric);
    if (spec.lr_overlay) t.column("lr");
    tables.push_back(std::move(t));
  }

  std::map<std::string, Series> by_run;
  std::vector<std::string> order;
  std::vector<metrics::MetricRecord> merged;
  const bool metric_table = tables.front().columns == csv::metric_columns();
  for (const auto& t : tables) {
    const std::size_t c_run = t.column("run_id"), c_x = t.column(spec.x), c_y = t.column(spec.metric);
    const std::size_t c_lr = spec.lr_overlay ? t.column("lr") : 0;
    for (const auto& row : t.rows) {
      auto [it, fresh] = by_run.try_emplace(row[c_run]);
      if (fresh) {
        it->second.label = row[c_run];
        order.push_back(row[c_run]);
      }
      if (row[c_x].empty()) continue;
      const double x = std::stod(row[c_x]);
      if (!row[c_y].empty()) it->second.points.push_back({x, std::stod(row[c_y])});
      if (spec.lr_overlay && !row[c_lr].empty()) it->second.lr.push_back({x, std::stod(row[c_lr])});
    }
  }
  std::vector<Series> series;
  for (const auto& id : order) {
    Series s = std::move(by_run[id]);
    auto by_x = [](const Point& a, const Point& b) { return a.x < b.x; };
    std::sort(s.points.begin(), s.points.end(), by_x);
    std::sort(s.lr.begin(), s.lr.end(), by_x);
    if (!s.points.empty()) series.push_back(std::move(s));
  }
  if (series.empty()) throw FormatError("report: column '" + spec.metric + "' has no values");
  const std::string svg = render_svg(series, spec);

  ReportOutput out;
  out.series = series.size();
  out.svg = fs::path(out_stem.string() + ".svg");
  out.data_csv = fs::path(out_stem.string() + ".csv");
  out.merged_csv = fs::path(out_stem.string() + ".merged.csv");

  csv::Table data;
  data.columns = {"series", spec.x, spec.metric, "lr"};
  for (const auto& s : series) {
    std::map<double, std::string> lr_at;
    for (const auto& p : s.lr) lr_at[p.x] = csv::format_real(p.y);
    for (const auto& p : s.points) {
      data.rows.push_back({s.label, csv::format_real(p.x), csv::format_real(p.y),
                           lr_at.contains(p.x) ? lr_at[p.x] : ""});
    }
  }
  // Merge before writing so a conflict leaves no partial output.
  std::map<std::pair<std::string, std::uint64_t>, metrics::MetricRecord> merged_rows;
  csv::Table all;
  if (metric_table) {
    for (const auto& in : inputs) {
      const fs::path p = fs::is_directory(in) ? in / "metrics.csv" : in;
      for (auto& r : csv::read_metrics(p)) {
        auto key = std::make_pair(r.run_id, r.step);
        auto [it, fresh] = merged_rows.try_emplace(key, r);
        if (!fresh) it->second = csv::merge_records(it->second, r);
      }
    }
  } else {
    all = tables.front();
    for (std::size_t i = 1; i < tables.size(); ++i) {
      if (tables[i].columns != all.columns) throw FormatError("report: inputs have different columns");
      all.rows.insert(all.rows.end(), tables[i].rows.begin(), tables[i].rows.end());
    }
  }

  if (out_stem.has_parent_path()) fs::create_directories(out_stem.parent_path());
  csv::write_table(out.data_csv, data);
  if (metric_table) {
    for (auto& [_, r] : merged_rows) merged.push_back(std::move(r));
    csv::write_metrics(out.merged_csv, std::move(merged));
  } else {
    csv::write_table(out.merged_csv, all);
  }
  std::ofstream(out.svg, std::ios::trunc) << svg;
  return out;
}

}  // namespace qlab::report
