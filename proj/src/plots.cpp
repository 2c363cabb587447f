#include "ssng/plots.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>

#include <json.hpp>

namespace ssng::runner {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      default: out += c;
    }
  }
  return out;
}

constexpr const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

}  // namespace

std::string line_chart_svg(const std::string& title, const std::string& xlabel,
                           const std::vector<Series>& series) {
  constexpr double W = 640, H = 400, L = 70, R = 150, T = 40, B = 50;
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series) {
    for (const auto& [x, y] : s.points) {
      if (!std::isfinite(x) || !std::isfinite(y)) continue;
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y0 -= 0.5, y1 += 0.5;
  const double pw = W - L - R, ph = H - T - B;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return T + (1.0 - (y - y0) / (y1 - y0)) * ph; };

  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"400\" "
                    "font-family=\"sans-serif\" font-size=\"12\">\n";
  svg += "<rect width=\"640\" height=\"400\" fill=\"white\"/>\n";
  svg += "<text x=\"" + fmt("%.1f", L) + "\" y=\"24\" font-size=\"15\">" + escape(title) + "</text>\n";
  svg += "<rect x=\"" + fmt("%.1f", L) + "\" y=\"" + fmt("%.1f", T) + "\" width=\"" + fmt("%.1f", pw) +
         "\" height=\"" + fmt("%.1f", ph) + "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double yv = y0 + (y1 - y0) * t / 4.0;
    const double xv = x0 + (x1 - x0) * t / 4.0;
    svg += "<text x=\"" + fmt("%.1f", L - 6) + "\" y=\"" + fmt("%.1f", py(yv) + 4) +
           "\" text-anchor=\"end\">" + fmt("%.4g", yv) + "</text>\n";
    svg += "<text x=\"" + fmt("%.1f", px(xv)) + "\" y=\"" + fmt("%.1f", H - B + 16) +
           "\" text-anchor=\"middle\">" + fmt("%.4g", xv) + "</text>\n";
  }
  svg += "<text x=\"" + fmt("%.1f", L + pw / 2) + "\" y=\"" + fmt("%.1f", H - 12) +
         "\" text-anchor=\"middle\">" + escape(xlabel) + "</text>\n";
  for (size_t i = 0; i < series.size(); ++i) {
    const auto* color = kColors[i % std::size(kColors)];
    std::string pts;
    for (const auto& [x, y] : series[i].points) {
      if (!std::isfinite(x) || !std::isfinite(y)) continue;
      pts += fmt("%.2f", px(x)) + "," + fmt("%.2f", py(y)) + " ";
    }
    if (series[i].points.size() == 1) {
      const auto& [x, y] = series[i].points.front();
      svg += "<circle cx=\"" + fmt("%.2f", px(x)) + "\" cy=\"" + fmt("%.2f", py(y)) + "\" r=\"3\" fill=\"" +
             color + "\"/>\n";
    } else {
      svg += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"1.5\" points=\"" + pts +
             "\"/>\n";
    }
    const double ly = T + 14 + 18 * static_cast<double>(i);
    svg += "<line x1=\"" + fmt("%.1f", W - R + 10) + "\" y1=\"" + fmt("%.1f", ly - 4) + "\" x2=\"" +
           fmt("%.1f", W - R + 30) + "\" y2=\"" + fmt("%.1f", ly - 4) + "\" stroke=\"" + color +
           "\" stroke-width=\"2\"/>\n";
    svg += "<text x=\"" + fmt("%.1f", W - R + 36) + "\" y=\"" + fmt("%.1f", ly) + "\">" + escape(series[i].name) +
           "</text>\n";
  }
  svg += "</svg>\n";
  return svg;
}

PlotSummary emit_plots(const fs::path& metrics, const fs::path& report, const fs::path& out_dir) {
  PlotSummary summary;
  std::map<std::string, Series> by_key;
  std::vector<json> rows;

  std::ifstream in(metrics);
  if (metrics.empty() || !in) {
    summary.skipped.emplace_back(metrics.string(), "metrics file missing");
  } else {
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      try {
        rows.push_back(json::parse(line));
      } catch (const json::exception&) {
        summary.skipped.emplace_back(metrics.string(), "unparsable line ignored");
      }
    }
    if (rows.empty()) summary.skipped.emplace_back(metrics.string(), "metrics file empty");
  }
  for (const auto& r : rows) {
    if (!r.is_object() || !r.contains("epoch") || !r["epoch"].is_number()) continue;
    const double x = r["epoch"].get<double>();
    for (const auto& [k, v] : r.items()) {
      if (k == "epoch" || !v.is_number()) continue;
      auto& s = by_key[k];
      s.name = k;
      s.points.emplace_back(x, v.get<double>());
    }
  }

  json rep;
  if (!report.empty()) {
    std::ifstream rin(report);
    if (!rin) {
      summary.skipped.emplace_back(report.string(), "report file missing");
    } else {
      try {
        rep = json::parse(rin);
      } catch (const json::exception&) {
        summary.skipped.emplace_back(report.string(), "report file unparsable");
      }
    }
  }

  auto pick = [&](std::initializer_list<const char*> keys) {
    std::vector<Series> out;
    for (const char* k : keys) {
      auto it = by_key.find(k);
      if (it != by_key.end() && !it->second.points.empty()) out.push_back(it->second);
    }
    return out;
  };

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  auto emit = [&](const std::string& file, const std::string& title, std::vector<Series> series) {
    if (series.empty()) {
      summary.skipped.emplace_back(file, "no data");
      return;
    }
    const auto path = out_dir / file;
    std::ofstream out(path, std::ios::trunc);
    out << line_chart_svg(title, "epoch", series);
    if (!out) {
      summary.skipped.emplace_back(file, "write failed");
      return;
    }
    summary.written.push_back(path);
  };

  emit("loss_curve.svg", "Training loss", pick({"loss", "align", "kl", "total_a", "total_b", "align_a", "align_b"}));
  emit("collapse_curve.svg", "Per-dimension std of normalized z", pick({"collapse_mean", "collapse_min"}));

  auto topsim = pick({"topsim_A", "topsim_B"});
  if (rep.is_object() && rep.contains("topsim") && rep["topsim"].is_object()) {
    const double last = rows.empty() ? 0.0 : rows.back().value("epoch", 0.0);
    for (const char* a : {"A", "B"}) {
      if (rep["topsim"].contains(a) && rep["topsim"][a].contains("rho")) {
        topsim.push_back({std::string("final_") + a, {{last, rep["topsim"][a]["rho"].get<double>()}}});
      }
    }
  }
  emit("topsim_curve.svg", "TopSim on unseen objects", topsim);
  return summary;
}

}  // namespace ssng::runner
