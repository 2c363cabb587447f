#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace ssng::runner {

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

// Minimal deterministic SVG line chart.
std::string line_chart_svg(const std::string& title, const std::string& xlabel,
                           const std::vector<Series>& series);

struct PlotSummary {
  std::vector<std::filesystem::path> written;
  std::vector<std::pair<std::string, std::string>> skipped;  // (plot or input, reason)
};

// Renders loss_curve.svg, collapse_curve.svg and topsim_curve.svg from a
// metrics JSONL file (and the final TopSim of a report, if given). Missing or
// empty inputs and plots without data are reported as skipped, never thrown.
PlotSummary emit_plots(const std::filesystem::path& metrics, const std::filesystem::path& report,
                       const std::filesystem::path& out_dir);

}  // namespace ssng::runner
