#include <gtest/gtest.h>

#include <fstream>
#include <regex>

#include "qlab/error.hpp"
#include "qlab/metrics_csv.hpp"
#include "qlab/report.hpp"
#include "test_support.hpp"

namespace qlab::report {
namespace {

namespace fs = std::filesystem;
using testing::ScratchDir;

// Minimal well-formedness check: balanced tags, quoted attributes, escaped text.
::testing::AssertionResult well_formed_xml(const std::string& doc) {
  std::vector<std::string> stack;
  std::size_t i = 0;
  bool root_seen = false;
  while (i < doc.size()) {
    if (doc[i] != '<') {
      const std::size_t next = doc.find('<', i);
      const std::string text = doc.substr(i, next == std::string::npos ? std::string::npos : next - i);
      for (std::size_t a = text.find('&'); a != std::string::npos; a = text.find('&', a + 1)) {
        if (!std::regex_search(text.substr(a), std::regex("^&(amp|lt|gt|quot|apos|#[0-9]+);"))) {
          return ::testing::AssertionFailure() << "bare '&' in text";
        }
      }
      if (stack.empty() && text.find_first_not_of(" \t\r\n") != std::string::npos) {
        return ::testing::AssertionFailure() << "text outside the root element";
      }
      i = next == std::string::npos ? doc.size() : next;
      continue;
    }
    const std::size_t close = doc.find('>', i);
    if (close == std::string::npos) return ::testing::AssertionFailure() << "unterminated tag";
    const std::string tag = doc.substr(i + 1, close - i - 1);
    i = close + 1;
    if (tag.starts_with("?") || tag.starts_with("!--")) continue;
    if (tag.starts_with("/")) {
      if (stack.empty() || stack.back() != tag.substr(1)) {
        return ::testing::AssertionFailure() << "mismatched </" << tag.substr(1) << ">";
      }
      stack.pop_back();
      continue;
    }
    static const std::regex element(R"(^([A-Za-z][\w:-]*)(\s+[\w:-]+="[^"<]*")*\s*(/?)$)");
    std::smatch m;
    if (!std::regex_match(tag, m, element)) return ::testing::AssertionFailure() << "bad tag <" << tag << ">";
    if (stack.empty()) {
      if (root_seen) return ::testing::AssertionFailure() << "second root element";
      root_seen = true;
    }
    if (m[3].str().empty()) stack.push_back(m[1].str());
  }
  if (!stack.empty()) return ::testing::AssertionFailure() << "unclosed <" << stack.back() << ">";
  if (!root_seen) return ::testing::AssertionFailure() << "no root element";
  return ::testing::AssertionSuccess();
}

std::size_t count(const std::string& hay, const std::string& needle) {
  std::size_t n = 0;
  for (auto p = hay.find(needle); p != std::string::npos; p = hay.find(needle, p + 1)) ++n;
  return n;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  return {std::istreambuf_iterator<char>(f), {}};
}

metrics::MetricRecord row(const std::string& id, std::uint64_t step, double ce) {
  metrics::MetricRecord r;
  r.run_id = id;
  r.step = step;
  r.tokens_seen = step * 1000;
  r.lr = step < 50 ? 3e-3 : 1e-3;
  r.val_ce_fp = ce;
  r.val_ce_q = {{3, ce * 1.1}};
  r.derive();
  return r;
}

TEST(RenderSvg, OnePolylinePerSeriesPlusOverlay) {
  Series s{"run <a&b>", {{1, 2}, {2, 1.5}, {3, 1.2}}, {{1, 3e-3}, {2, 3e-3}, {3, 1e-3}}};
  PlotSpec spec;
  spec.metric = "val_ce_fp";
  spec.title = "CE & friends";
  const std::string svg = render_svg({s}, spec);
  EXPECT_TRUE(well_formed_xml(svg));
  EXPECT_EQ(count(svg, "<polyline class=\"series\""), 1u);
  EXPECT_EQ(count(svg, "<polyline class=\"lr\""), 1u);
  EXPECT_NE(svg.find("run &lt;a&amp;b&gt;"), std::string::npos);
  EXPECT_NE(svg.find("stroke-dasharray"), std::string::npos);
}

TEST(RenderSvg, LogAxisDropsNonPositiveX) {
  Series a{"a", {{0, 5}, {10, 4}, {100, 3}, {1000, 2}}, {}};
  Series b{"b", {{10, 4.5}, {1000, 2.5}}, {}};
  PlotSpec spec;
  spec.metric = "m";
  spec.log_x = true;
  spec.lr_overlay = false;
  const std::string svg = render_svg({a, b}, spec);
  EXPECT_TRUE(well_formed_xml(svg));
  EXPECT_EQ(count(svg, "<polyline class=\"series\""), 2u);
  EXPECT_EQ(count(svg, "<polyline class=\"lr\""), 0u);
}

TEST(RenderSvg, NothingToDrawIsAnError) {
  PlotSpec spec;
  spec.metric = "m";
  EXPECT_THROW(render_svg({}, spec), ContractViolation);
  spec.log_x = true;
  EXPECT_THROW(render_svg({Series{"a", {{0, 1}}, {}}}, spec), ContractViolation);
}

TEST(Report, SingleRunWritesSvgAndData) {
  ScratchDir dir;
  csv::write_metrics(dir / "metrics.csv", {row("r1", 0, 5.0), row("r1", 50, 3.0), row("r1", 100, 2.0)});
  PlotSpec spec;
  spec.metric = "val_ce_fp";
  const auto out = cmd_report({dir.path()}, spec, dir / "out" / "panel");
  EXPECT_EQ(out.series, 1u);
  const std::string svg = slurp(out.svg);
  EXPECT_TRUE(well_formed_xml(svg));
  EXPECT_EQ(count(svg, "<polyline class=\"series\""), 1u);
  EXPECT_EQ(count(svg, "<polyline class=\"lr\""), 1u);
  const csv::Table data = csv::read_table(out.data_csv);
  EXPECT_EQ(data.columns, (std::vector<std::string>{"series", "tokens_seen", "val_ce_fp", "lr"}));
  ASSERT_EQ(data.rows.size(), 3u);
  EXPECT_EQ(data.rows[1][1], "50000");
  EXPECT_EQ(data.rows[1][3], "0.001");
  EXPECT_EQ(csv::read_metrics(out.merged_csv).size(), 3u);
}

TEST(Report, SeveralRunsMerge) {
  ScratchDir dir;
  fs::create_directories(dir / "a");
  fs::create_directories(dir / "b");
  csv::write_metrics(dir / "a" / "metrics.csv", {row("ra", 0, 5.0), row("ra", 100, 2.0)});
  csv::write_metrics(dir / "b" / "metrics.csv", {row("rb", 0, 5.0), row("rb", 100, 2.2), row("rb+lawa", 100, 2.1)});
  PlotSpec spec;
  spec.metric = "rel_ce_err3";
  spec.log_x = true;
  const auto out = cmd_report({dir / "a", dir / "b"}, spec, dir / "panel");
  EXPECT_EQ(out.series, 3u);
  EXPECT_EQ(count(slurp(out.svg), "<polyline class=\"series\""), 3u);
  EXPECT_EQ(csv::read_metrics(out.merged_csv).size(), 5u);
}

TEST(Report, EmptyCsvFailsWithoutOutput) {
  ScratchDir dir;
  std::ofstream(dir / "empty.csv") << "";
  PlotSpec spec;
  spec.metric = "val_ce_fp";
  EXPECT_THROW(cmd_report({dir / "empty.csv"}, spec, dir / "panel"), FormatError);
  std::ofstream(dir / "header_only.csv") << csv::header_line() << "\n";
  EXPECT_THROW(cmd_report({dir / "header_only.csv"}, spec, dir / "panel"), FormatError);
  EXPECT_FALSE(fs::exists(dir / "panel.svg"));
  EXPECT_FALSE(fs::exists(dir / "panel.csv"));
}

TEST(Report, MissingColumnIsNamed) {
  ScratchDir dir;
  std::ofstream(dir / "t.csv") << "run_id,tokens_seen,lr\nx,1,0.1\n";
  PlotSpec spec;
  spec.metric = "val_ce_q3";
  try {
    cmd_report({dir / "t.csv"}, spec, dir / "panel");
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("val_ce_q3"), std::string::npos);
  }
  EXPECT_FALSE(fs::exists(dir / "panel.svg"));
}

}  // namespace
}  // namespace qlab::report
