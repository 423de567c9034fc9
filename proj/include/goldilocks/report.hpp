// SPDX-License-Identifier: Apache-2.0
#pragma once

// Paired-run report: per-arm CSVs, an aligned CSV, and seven SVG line charts.
// Baseline series are drawn on the goldilocks step axis (baseline step / ratio).

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "goldilocks/error.hpp"
#include "goldilocks/metrics.hpp"

namespace goldilocks {

struct Curve {
  std::string label;
  std::string color;
  std::vector<std::pair<double, double>> points;
};

struct Band {
  std::string color;
  std::vector<double> x, low, high;
};

struct Chart {
  std::string title;
  std::string y_label;
  std::vector<Curve> curves;
  std::vector<Band> bands;
};

namespace detail {

inline std::string svg_escape(const std::string& s) {
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

inline std::string fmt(double v, int precision = 2) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

}  // namespace detail

inline std::string render_svg(const Chart& chart) {
  constexpr double W = 640, H = 400, L = 70, R = 20, T = 40, B = 50;
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  auto grow = [&](double x, double y) {
    if (!std::isfinite(x) || !std::isfinite(y)) return;
    x0 = std::min(x0, x);
    x1 = std::max(x1, x);
    y0 = std::min(y0, y);
    y1 = std::max(y1, y);
  };
  for (const auto& c : chart.curves)
    for (auto [x, y] : c.points) grow(x, y);
  for (const auto& b : chart.bands)
    for (std::size_t i = 0; i < b.x.size(); ++i) {
      grow(b.x[i], b.low[i]);
      grow(b.x[i], b.high[i]);
    }
  if (!std::isfinite(x0)) {
    x0 = 0;
    x1 = 1;
    y0 = 0;
    y1 = 1;
  }
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) {
    y0 -= 0.5;
    y1 += 0.5;
  }
  const double pad = 0.05 * (y1 - y0);
  y0 -= pad;
  y1 += pad;
  auto sx = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto sy = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
     << ' ' << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << detail::svg_escape(chart.title)
     << "</text>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4.0;
    const double yv = y0 + (y1 - y0) * i / 4.0;
    os << "<text x=\"" << detail::fmt(sx(xv), 1) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">"
       << detail::fmt(xv, 0) << "</text>\n";
    os << "<text x=\"" << L - 6 << "\" y=\"" << detail::fmt(sy(yv) + 4, 1) << "\" text-anchor=\"end\">"
       << detail::fmt(yv, 3) << "</text>\n";
    os << "<line x1=\"" << L << "\" y1=\"" << detail::fmt(sy(yv), 1) << "\" x2=\"" << W - R << "\" y2=\""
       << detail::fmt(sy(yv), 1) << "\" stroke=\"#ddd\"/>\n";
  }
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">step (goldilocks scale)</text>\n";
  os << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
     << (T + H - B) / 2 << ")\">" << detail::svg_escape(chart.y_label) << "</text>\n";

  for (const auto& b : chart.bands) {
    if (b.x.empty()) continue;
    os << "<polygon fill=\"" << b.color << "\" fill-opacity=\"0.25\" stroke=\"none\" points=\"";
    for (std::size_t i = 0; i < b.x.size(); ++i) os << detail::fmt(sx(b.x[i]), 2) << ',' << detail::fmt(sy(b.high[i]), 2) << ' ';
    for (std::size_t i = b.x.size(); i-- > 0;) os << detail::fmt(sx(b.x[i]), 2) << ',' << detail::fmt(sy(b.low[i]), 2) << ' ';
    os << "\"/>\n";
  }
  int legend = 0;
  for (const auto& c : chart.curves) {
    os << "<polyline fill=\"none\" stroke=\"" << c.color << "\" stroke-width=\"1.5\" points=\"";
    for (auto [x, y] : c.points) {
      if (std::isfinite(y)) os << detail::fmt(sx(x), 2) << ',' << detail::fmt(sy(y), 2) << ' ';
    }
    os << "\"/>\n";
    const double ly = T + 14 + 16 * legend++;
    os << "<line x1=\"" << W - R - 150 << "\" y1=\"" << ly - 4 << "\" x2=\"" << W - R - 130 << "\" y2=\"" << ly - 4
       << "\" stroke=\"" << c.color << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << W - R - 124 << "\" y=\"" << ly << "\">" << detail::svg_escape(c.label) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

struct ReportOptions {
  Ratio ratio{8, 6};
  double ema_alpha = 0.9;
};

namespace detail {

inline std::vector<std::pair<double, double>> to_points(const StepSeries& s, double x_scale = 1.0) {
  std::vector<std::pair<double, double>> out;
  out.reserve(s.size());
  for (const auto& p : s) out.emplace_back(static_cast<double>(p.step) * x_scale, p.value);
  return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text,
                       std::vector<std::filesystem::path>& written) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorCode::Io, "cannot write " + path.string());
  written.push_back(path);
  os << text;
  if (!os) throw Error(ErrorCode::Io, "write failed: " + path.string());
}

}  // namespace detail

/// Writes goldilocks.csv, baseline.csv, aligned.csv and seven SVG charts into
/// `out_dir`; returns the files written. On any failure, removes what it wrote.
inline std::vector<std::filesystem::path> emit_report(const std::vector<MetricsRecord>& goldilocks,
                                                      const std::vector<MetricsRecord>& baseline,
                                                      const std::filesystem::path& out_dir,
                                                      const ReportOptions& opts = {}) {
  if (goldilocks.empty() || baseline.empty()) {
    throw Error(ErrorCode::EmptyReport, std::string("no metrics for the ") + (goldilocks.empty() ? "goldilocks" : "baseline") + " arm");
  }
  if (baseline.back().step < aligned_step(goldilocks.back().step, opts.ratio)) {
    throw Error(ErrorCode::AlignmentError, "baseline run is shorter than ratio x goldilocks steps");
  }
  std::vector<std::filesystem::path> written;
  try {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw Error(ErrorCode::Io, "cannot create " + out_dir.string() + ": " + ec.message());

    std::ostringstream g, b;
    write_csv(g, goldilocks);
    write_csv(b, baseline);
    detail::write_text(out_dir / "goldilocks.csv", g.str(), written);
    detail::write_text(out_dir / "baseline.csv", b.str(), written);

    const double back = static_cast<double>(opts.ratio.den) / static_cast<double>(opts.ratio.num);
    struct Spec {
      Column column;
      const char* name;
      const char* file;
      const char* title;
      bool smooth;
      bool teacher_only;
    };
    const Spec specs[] = {
        {Column::ValidationAccuracy, "validation_accuracy", "validation_accuracy.svg", "Validation accuracy", false, false},
        {Column::MeanReward, "mean_reward", "mean_reward.svg", "Mean training reward (EMA)", true, false},
        {Column::RewardStd, "reward_std", "reward_std.svg", "Reward std (EMA)", true, false},
        {Column::ZeroVariance, "zero_variance", "zero_variance_fraction.svg", "Zero-variance fraction (EMA)", true, false},
        {Column::GradNorm, "grad_norm", "grad_norm.svg", "Gradient norm (EMA)", true, false},
        {Column::TeacherValMae, "teacher_val_mae", "teacher_mae.svg", "Teacher MAE on unseen samples (EMA)", true, true},
    };

    // aligned.csv: goldilocks step, matching baseline step, then both arms per column
    std::ostringstream aligned;
    aligned << "step,baseline_step";
    std::vector<std::vector<AlignedRow>> columns;
    for (const auto& s : specs) {
      if (s.teacher_only) continue;
      aligned << ",goldilocks_" << s.name << ",baseline_" << s.name;
      auto gs = step_means(goldilocks, s.column);
      auto bs = step_means(baseline, s.column);
      if (s.smooth) {
        gs = ema(gs, opts.ema_alpha);
        bs = ema(bs, opts.ema_alpha);
      }
      StepSeries steps;
      for (const auto& r : goldilocks) {
        if (steps.empty() || steps.back().step != r.step) steps.push_back({r.step, kMissing});
      }
      std::vector<AlignedRow> col;
      for (const auto& p : steps) {
        const auto bstep = aligned_step(p.step, opts.ratio);
        col.push_back({p.step, bstep, value_at(gs, p.step), value_at(bs, bstep)});
      }
      columns.push_back(std::move(col));
    }
    aligned << '\n';
    for (std::size_t i = 0; i < columns.front().size(); ++i) {
      std::string line = std::to_string(columns.front()[i].step) + "," + std::to_string(columns.front()[i].baseline_step);
      for (const auto& col : columns) {
        line += ',';
        detail::append_real(line, col[i].goldilocks);
        line += ',';
        detail::append_real(line, col[i].baseline);
      }
      aligned << line << '\n';
    }
    detail::write_text(out_dir / "aligned.csv", aligned.str(), written);

    for (const auto& s : specs) {
      Chart chart;
      chart.title = s.title;
      chart.y_label = s.name;
      auto gs = step_means(goldilocks, s.column);
      if (s.smooth) gs = ema(gs, opts.ema_alpha);
      chart.curves.push_back({"goldilocks", "#d62728", detail::to_points(gs)});
      if (!s.teacher_only) {
        auto bs = step_means(baseline, s.column);
        if (s.smooth) bs = ema(bs, opts.ema_alpha);
        chart.curves.push_back({"baseline (step x " + std::to_string(opts.ratio.den) + "/" +
                                    std::to_string(opts.ratio.num) + ")",
                                "#1f77b4", detail::to_points(bs, back)});
      }
      detail::write_text(out_dir / s.file, render_svg(chart), written);
    }

    Chart band;
    band.title = "Teacher predictions over candidates (mean +/- std)";
    band.y_label = "predicted utility";
    const auto mu = step_means(goldilocks, Column::TeacherMu);
    const auto sigma = step_means(goldilocks, Column::TeacherSigma);
    Band bnd{"#d62728", {}, {}, {}};
    for (std::size_t i = 0; i < mu.size() && i < sigma.size(); ++i) {
      bnd.x.push_back(static_cast<double>(mu[i].step));
      bnd.low.push_back(mu[i].value - sigma[i].value);
      bnd.high.push_back(mu[i].value + sigma[i].value);
    }
    band.bands.push_back(std::move(bnd));
    band.curves.push_back({"mean", "#d62728", detail::to_points(mu)});
    detail::write_text(out_dir / "teacher_prediction.svg", render_svg(band), written);
  } catch (...) {
    for (const auto& p : written) {
      std::error_code ec;
      std::filesystem::remove(p, ec);
    }
    throw;
  }
  return written;
}

}  // namespace goldilocks
