#pragma once

// Trajectory panels as standalone SVG, with the plotted data written alongside.

#include <filesystem>
#include <string>
#include <vector>

namespace qlab::report {

struct Point {
  double x = 0.0;
  double y = 0.0;
};

struct Series {
  std::string label;
  std::vector<Point> points;
  std::vector<Point> lr;  // optional η(t) overlay, same x units
};

struct PlotSpec {
  std::string metric;               // CSV column plotted on the y axis
  std::string x = "tokens_seen";
  bool log_x = false;
  bool lr_overlay = true;
  std::string title;
};

/// One polyline (class "series") per series, plus a dotted polyline (class "lr")
/// per series with an η overlay. Non-positive x values are dropped on a log axis.
/// Throws ContractViolation when no series has a drawable point.
std::string render_svg(const std::vector<Series>& series, const PlotSpec& spec);

struct ReportOutput {
  std::filesystem::path svg;
  std::filesystem::path data_csv;
  std::filesystem::path merged_csv;
  std::size_t series = 0;
};

/// Reads metrics.csv from each input (a run directory or a CSV file), merges the rows
/// into <out>.merged.csv, and writes <out>.svg plus <out>.csv (series,x,y,lr).
/// Throws FormatError naming the column when a required column is absent, and for
/// empty inputs; nothing is written in either case.
ReportOutput cmd_report(const std::vector<std::filesystem::path>& inputs, const PlotSpec& spec,
                        const std::filesystem::path& out_stem);

}  // namespace qlab::report
