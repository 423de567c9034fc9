// SPDX-License-Identifier: Apache-2.0
#pragma once

// Per-prompt training metrics, their CSV form, and the step-level views used
// for comparison: per-step means, EMA smoothing, compute-normalized
// alignment, and last-k validation averaging.
//
// CSV schema (header row, then one row per selected prompt):
//   step                 1-based student update index
//   slot                 0-based position of the prompt inside the step's batch
//   question_id
//   mean_reward          fraction of correct rollouts in the group (p_hat)
//   reward_std           population std of the group's total rewards
//   zero_variance        1 iff every rollout got the same reward
//   grad_norm            norm of this prompt's loss gradient (IRT: sqrt(p_hat(1-p_hat)))
//   teacher_mu           mean teacher prediction over the candidate set
//   teacher_sigma        population std of those predictions
//   teacher_val_mae      unseen-sample MAE of the teacher update this prompt triggered
//   validation_accuracy  set on the last prompt of an evaluation step
// Missing values are empty cells. Reals are written in shortest round-trip form.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "goldilocks/error.hpp"

namespace goldilocks {

inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

struct MetricsRecord {
  std::int64_t step = 0;
  std::int64_t slot = 0;
  std::uint64_t question_id = 0;
  double mean_reward = 0.0;
  double reward_std = 0.0;
  int zero_variance = 0;
  double grad_norm = 0.0;
  double teacher_mu = kMissing;
  double teacher_sigma = kMissing;
  double teacher_val_mae = kMissing;
  double validation_accuracy = kMissing;
};

inline constexpr std::string_view kCsvHeader =
    "step,slot,question_id,mean_reward,reward_std,zero_variance,grad_norm,teacher_mu,teacher_sigma,"
    "teacher_val_mae,validation_accuracy";

enum class Column { MeanReward, RewardStd, ZeroVariance, GradNorm, TeacherMu, TeacherSigma, TeacherValMae, ValidationAccuracy };

inline double column_value(const MetricsRecord& r, Column c) {
  switch (c) {
    case Column::MeanReward: return r.mean_reward;
    case Column::RewardStd: return r.reward_std;
    case Column::ZeroVariance: return static_cast<double>(r.zero_variance);
    case Column::GradNorm: return r.grad_norm;
    case Column::TeacherMu: return r.teacher_mu;
    case Column::TeacherSigma: return r.teacher_sigma;
    case Column::TeacherValMae: return r.teacher_val_mae;
    case Column::ValidationAccuracy: return r.validation_accuracy;
  }
  return kMissing;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

namespace detail {
inline void append_real(std::string& out, double v) {
  if (std::isnan(v)) return;
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, res.ptr);
}

template <class T>
T parse_number(std::string_view s, std::string_view what) {
  T v{};
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw Error(ErrorCode::InvalidInput, "bad " + std::string(what) + " value '" + std::string(s) + "'");
  }
  return v;
}

inline double parse_real(std::string_view s, std::string_view what) {
  if (s.empty()) return kMissing;
  return parse_number<double>(s, what);
}
}  // namespace detail

inline std::string to_csv_row(const MetricsRecord& r) {
  std::string out;
  out += std::to_string(r.step);
  out += ',';
  out += std::to_string(r.slot);
  out += ',';
  out += std::to_string(r.question_id);
  for (double v : {r.mean_reward, r.reward_std}) {
    out += ',';
    detail::append_real(out, v);
  }
  out += ',';
  out += std::to_string(r.zero_variance);
  for (double v : {r.grad_norm, r.teacher_mu, r.teacher_sigma, r.teacher_val_mae, r.validation_accuracy}) {
    out += ',';
    detail::append_real(out, v);
  }
  return out;
}

inline void write_csv(std::ostream& os, const std::vector<MetricsRecord>& rows) {
  os << kCsvHeader << '\n';
  for (const auto& r : rows) os << to_csv_row(r) << '\n';
}

inline void write_csv(const std::filesystem::path& path, const std::vector<MetricsRecord>& rows) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorCode::Io, "cannot open " + path.string() + " for writing");
  write_csv(os, rows);
  if (!os) throw Error(ErrorCode::Io, "write failed: " + path.string());
}

inline MetricsRecord parse_csv_row(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    cells.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  if (cells.size() != 11) throw Error(ErrorCode::InvalidInput, "metrics row needs 11 cells: " + std::string(line));
  MetricsRecord r;
  r.step = detail::parse_number<std::int64_t>(cells[0], "step");
  r.slot = detail::parse_number<std::int64_t>(cells[1], "slot");
  r.question_id = detail::parse_number<std::uint64_t>(cells[2], "question_id");
  r.mean_reward = detail::parse_real(cells[3], "mean_reward");
  r.reward_std = detail::parse_real(cells[4], "reward_std");
  r.zero_variance = detail::parse_number<int>(cells[5], "zero_variance");
  r.grad_norm = detail::parse_real(cells[6], "grad_norm");
  r.teacher_mu = detail::parse_real(cells[7], "teacher_mu");
  r.teacher_sigma = detail::parse_real(cells[8], "teacher_sigma");
  r.teacher_val_mae = detail::parse_real(cells[9], "teacher_val_mae");
  r.validation_accuracy = detail::parse_real(cells[10], "validation_accuracy");
  return r;
}

inline std::vector<MetricsRecord> read_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != kCsvHeader) throw Error(ErrorCode::InvalidInput, "unexpected metrics CSV header");
  std::vector<MetricsRecord> rows;
  while (std::getline(is, line)) {
    if (!line.empty()) rows.push_back(parse_csv_row(line));
  }
  return rows;
}

inline std::vector<MetricsRecord> read_csv(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::Io, "cannot open " + path.string());
  return read_csv(is);
}

// ---------------------------------------------------------------------------
// Step-level views
// ---------------------------------------------------------------------------

struct StepPoint {
  std::int64_t step = 0;
  double value = 0.0;
};
using StepSeries = std::vector<StepPoint>;

/// Mean of `column` over the rows of each step; steps where the column is
/// missing on every row are omitted.
inline StepSeries step_means(const std::vector<MetricsRecord>& rows, Column column) {
  std::map<std::int64_t, std::pair<double, int>> acc;
  for (const auto& r : rows) {
    const double v = column_value(r, column);
    if (std::isnan(v)) continue;
    auto& a = acc[r.step];
    a.first += v;
    a.second += 1;
  }
  StepSeries out;
  out.reserve(acc.size());
  for (const auto& [step, a] : acc) out.push_back({step, a.first / a.second});
  return out;
}

/// s_0 = x_0, s_t = alpha s_{t-1} + (1 - alpha) x_t.
inline StepSeries ema(const StepSeries& series, double alpha) {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw Error(ErrorCode::InvalidInput, "EMA alpha must lie in (0, 1]");
  StepSeries out;
  out.reserve(series.size());
  for (std::size_t i = 0; i < series.size(); ++i) {
    const double s = i == 0 ? series[0].value : alpha * out.back().value + (1.0 - alpha) * series[i].value;
    out.push_back({series[i].step, s});
  }
  return out;
}

/// Value of the series at `step`, or NaN.
inline double value_at(const StepSeries& series, std::int64_t step) {
  auto it = std::lower_bound(series.begin(), series.end(), step,
                             [](const StepPoint& p, std::int64_t s) { return p.step < s; });
  return (it != series.end() && it->step == step) ? it->value : kMissing;
}

struct Ratio {
  std::int64_t num = 8;
  std::int64_t den = 6;
  double value() const noexcept { return static_cast<double>(num) / static_cast<double>(den); }
};

/// round(ratio * n), halves rounded up, in exact integer arithmetic.
inline std::int64_t aligned_step(std::int64_t n, Ratio ratio) {
  return (2 * ratio.num * n + ratio.den) / (2 * ratio.den);
}

struct AlignedRow {
  std::int64_t step = 0;           // goldilocks step n
  std::int64_t baseline_step = 0;  // round(ratio * n)
  double goldilocks = kMissing;
  double baseline = kMissing;
};

/// Pairs goldilocks step n with baseline step round(ratio n) for one
/// step-level series of each arm.
inline std::vector<AlignedRow> normalized_compare(const StepSeries& goldilocks, const StepSeries& baseline,
                                                  Ratio ratio) {
  if (goldilocks.empty()) return {};
  const std::int64_t last_needed = aligned_step(goldilocks.back().step, ratio);
  if (baseline.empty() || baseline.back().step < last_needed) {
    throw Error(ErrorCode::AlignmentError, "baseline ends at step " +
                                               std::to_string(baseline.empty() ? 0 : baseline.back().step) +
                                               ", alignment needs step " + std::to_string(last_needed));
  }
  std::vector<AlignedRow> out;
  out.reserve(goldilocks.size());
  for (const auto& p : goldilocks) {
    const auto b = aligned_step(p.step, ratio);
    out.push_back({p.step, b, p.value, value_at(baseline, b)});
  }
  return out;
}

/// Mean of the last `last_k` validation accuracies with step <= max_step.
inline double final_accuracy(const std::vector<MetricsRecord>& rows, std::size_t last_k = 5,
                             std::int64_t max_step = std::numeric_limits<std::int64_t>::max()) {
  if (last_k == 0) throw Error(ErrorCode::InvalidInput, "last_k must be positive");
  std::vector<double> acc;
  for (const auto& r : rows) {
    if (r.step <= max_step && !std::isnan(r.validation_accuracy)) acc.push_back(r.validation_accuracy);
  }
  if (acc.size() < last_k) {
    throw Error(ErrorCode::InvalidInput,
                "need " + std::to_string(last_k) + " evaluations, have " + std::to_string(acc.size()));
  }
  double s = 0.0;
  for (std::size_t i = acc.size() - last_k; i < acc.size(); ++i) s += acc[i];
  return s / static_cast<double>(last_k);
}

}  // namespace goldilocks
