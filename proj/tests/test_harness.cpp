// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "goldilocks/harness.hpp"
#include "goldilocks/report.hpp"

using namespace goldilocks;
namespace fs = std::filesystem;

namespace {

ExperimentConfig small_irt() {
  auto cfg = load_config(std::string(GOLDILOCKS_CONFIG_DIR) + "/smoke.conf");
  cfg.total_steps = 30;
  cfg.eval_every = 5;
  return cfg;
}

std::string csv_of(const std::vector<MetricsRecord>& rows) {
  std::ostringstream os;
  write_csv(os, rows);
  return os.str();
}

fs::path scratch_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("goldilocks_" + name);
  fs::remove_all(p);
  return p;
}

MetricsRecord row_at(std::int64_t step, double acc) {
  MetricsRecord r;
  r.step = step;
  r.validation_accuracy = acc;
  return r;
}

}  // namespace

// --- metrics ------------------------------------------------------------------

TEST(Metrics, CsvRoundTripIsExact) {
  MetricsRecord r;
  r.step = 12;
  r.slot = 3;
  r.question_id = 99;
  r.mean_reward = 0.1;
  r.reward_std = 1.0 / 3.0;
  r.zero_variance = 0;
  r.grad_norm = 1e-300;
  r.teacher_mu = 0.2500000000000001;
  MetricsRecord s;
  s.step = 13;
  s.validation_accuracy = 0.75;
  const std::vector<MetricsRecord> rows{r, s};
  const std::string text = csv_of(rows);
  EXPECT_EQ(text.substr(0, text.find('\n')), kCsvHeader);
  std::istringstream is(text);
  const auto back = read_csv(is);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(csv_of(back), text);
  EXPECT_EQ(back[0].reward_std, r.reward_std);
  EXPECT_EQ(back[0].teacher_mu, r.teacher_mu);
  EXPECT_TRUE(std::isnan(back[0].validation_accuracy));
  EXPECT_TRUE(std::isnan(back[1].teacher_mu));
}

TEST(Metrics, CsvRejectsBadInput) {
  std::istringstream wrong_header("a,b\n");
  EXPECT_THROW(read_csv(wrong_header), Error);
  std::istringstream short_row(std::string(kCsvHeader) + "\n1,2,3\n");
  EXPECT_THROW(read_csv(short_row), Error);
  std::istringstream bad_cell(std::string(kCsvHeader) + "\n1,0,3,x,0,0,0,,,,\n");
  EXPECT_THROW(read_csv(bad_cell), Error);
}

TEST(Metrics, StepMeansSkipMissingCells) {
  std::vector<MetricsRecord> rows(4);
  rows[0].step = rows[1].step = 1;
  rows[2].step = rows[3].step = 2;
  rows[0].mean_reward = 0.2;
  rows[1].mean_reward = 0.6;
  rows[2].mean_reward = 1.0;
  rows[3].mean_reward = kMissing;
  const auto s = step_means(rows, Column::MeanReward);
  ASSERT_EQ(s.size(), 2u);
  EXPECT_DOUBLE_EQ(s[0].value, 0.4);
  EXPECT_DOUBLE_EQ(s[1].value, 1.0);
  EXPECT_TRUE(step_means(rows, Column::ValidationAccuracy).empty());
}

TEST(Metrics, EmaRecurrence) {
  const StepSeries x{{1, 1.0}, {2, 0.0}, {3, 0.0}, {4, 1.0}};
  const auto s = ema(x, 0.9);
  EXPECT_DOUBLE_EQ(s[0].value, 1.0);
  EXPECT_DOUBLE_EQ(s[1].value, 0.9);
  EXPECT_DOUBLE_EQ(s[2].value, 0.81);
  EXPECT_DOUBLE_EQ(s[3].value, 0.9 * 0.81 + 0.1);
  EXPECT_EQ(ema(x, 1.0)[3].value, 1.0);
  EXPECT_THROW(ema(x, 0.0), Error);
  EXPECT_THROW(ema(x, 1.5), Error);
}

TEST(Metrics, AlignedStepExamples) {
  const Ratio r{8, 6};
  EXPECT_EQ(aligned_step(20100, r), 26800);
  EXPECT_EQ(aligned_step(14400, r), 19200);
  EXPECT_EQ(aligned_step(8100, r), 10800);
  EXPECT_EQ(aligned_step(6, r), 8);
  EXPECT_EQ(aligned_step(1, r), 1);
  EXPECT_EQ(aligned_step(2, r), 3);  // 2.667
  EXPECT_EQ(aligned_step(2000, r), 2667);
  for (std::int64_t n = 0; n < 500; ++n) EXPECT_EQ(aligned_step(n, Ratio{1, 1}), n);
}

TEST(Metrics, NormalizedComparePairsAlignedSteps) {
  StepSeries g, b;
  for (std::int64_t n = 1; n <= 6; ++n) g.push_back({n, static_cast<double>(n)});
  for (std::int64_t n = 1; n <= 8; ++n) b.push_back({n, 10.0 * n});
  const auto rows = normalized_compare(g, b, Ratio{8, 6});
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_EQ(rows[5].baseline_step, 8);
  EXPECT_EQ(rows[5].baseline, 80.0);
  EXPECT_EQ(rows[2].baseline_step, 4);
  b.pop_back();
  try {
    normalized_compare(g, b, Ratio{8, 6});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::AlignmentError);
  }
  const auto same = normalized_compare(g, g, Ratio{1, 1});
  for (const auto& r : same) EXPECT_EQ(r.goldilocks, r.baseline);
}

TEST(Metrics, FinalAccuracyExamples) {
  std::vector<MetricsRecord> rows;
  for (int i = 1; i <= 6; ++i) rows.push_back(row_at(i * 10, 0.1 * i));
  EXPECT_NEAR(final_accuracy(rows, 5), 0.4, 1e-15);
  EXPECT_NEAR(final_accuracy(rows, 1), 0.6, 1e-15);
  EXPECT_NEAR(final_accuracy(rows, 5, 50), 0.3, 1e-15);
  EXPECT_THROW(final_accuracy(rows, 7), Error);
  EXPECT_THROW(final_accuracy(rows, 0), Error);
}

// --- training loop -------------------------------------------------------------

TEST(Schedule, BaselineRunsTheAlignedLength) {
  auto cfg = small_irt();
  cfg.total_steps = 2000;
  cfg.eval_every = 200;
  const auto g = Schedule::goldilocks(cfg);
  const auto b = Schedule::baseline(cfg);
  EXPECT_EQ(g.total_steps, 2000);
  EXPECT_EQ(b.total_steps, 2667);
  EXPECT_EQ(g.eval_steps.size(), 10u);
  EXPECT_EQ(b.eval_steps.size(), 10u);
  EXPECT_EQ(*b.eval_steps.begin(), 267);
  EXPECT_EQ(*b.eval_steps.rbegin(), 2667);
}

TEST(Harness, RunsAreDeterministic) {
  const auto cfg = small_irt();
  for (auto mode : {RunMode::Goldilocks, RunMode::Baseline}) {
    const auto a = run_experiment(cfg, mode);
    const auto b = run_experiment(cfg, mode);
    EXPECT_EQ(csv_of(a.rows), csv_of(b.rows));
    EXPECT_EQ(a.student_hash, b.student_hash);
  }
  auto other = cfg;
  apply_seed(other, 2);
  EXPECT_NE(csv_of(run_experiment(other, RunMode::Goldilocks).rows),
            csv_of(run_experiment(cfg, RunMode::Goldilocks).rows));
}

TEST(Harness, RowShapeAndEvaluationSchedule) {
  const auto cfg = small_irt();
  const auto r = run_experiment(cfg, RunMode::Goldilocks);
  ASSERT_EQ(r.rows.size(), static_cast<std::size_t>(cfg.total_steps) * cfg.batch_size);
  int evals = 0;
  for (std::size_t i = 0; i < r.rows.size(); ++i) {
    const auto& row = r.rows[i];
    EXPECT_EQ(row.step, static_cast<std::int64_t>(i / cfg.batch_size) + 1);
    EXPECT_EQ(row.slot, static_cast<std::int64_t>(i % cfg.batch_size));
    EXPECT_FALSE(std::isnan(row.teacher_mu));
    if (!std::isnan(row.validation_accuracy)) {
      ++evals;
      EXPECT_EQ(row.step % cfg.eval_every, 0);
      EXPECT_EQ(row.slot, static_cast<std::int64_t>(cfg.batch_size) - 1);
    }
  }
  EXPECT_EQ(evals, cfg.total_steps / cfg.eval_every);
  EXPECT_EQ(r.teacher_calls, 2u * r.rows.size());
}

TEST(Harness, ZeroVarianceFlagAgreesWithRewards) {
  const auto r = run_experiment(small_irt(), RunMode::Goldilocks);
  for (const auto& row : r.rows) {
    const bool extreme = row.mean_reward == 0.0 || row.mean_reward == 1.0;
    EXPECT_EQ(row.zero_variance == 1, extreme);
    EXPECT_EQ(row.zero_variance == 1, row.reward_std == 0.0);
    EXPECT_NEAR(row.reward_std, utility_score(row.mean_reward), 1e-12);
  }
}

TEST(Harness, TeacherMaeArrivesOnRows) {
  const auto r = run_experiment(small_irt(), RunMode::Goldilocks);
  int with_mae = 0;
  for (const auto& row : r.rows) with_mae += !std::isnan(row.teacher_val_mae);
  EXPECT_GT(with_mae, 0);
}

TEST(Harness, BaselineNeverTouchesATeacher) {
  const auto cfg = small_irt();
  const auto before = Teacher::constructed();
  const auto r = run_experiment(cfg, RunMode::Baseline);
  EXPECT_EQ(Teacher::constructed(), before);
  EXPECT_EQ(r.teacher_calls, 0u);
  EXPECT_FALSE(r.teacher_constructed);
  EXPECT_FALSE(r.teacher_model.has_value());
  for (const auto& row : r.rows) {
    EXPECT_TRUE(std::isnan(row.teacher_mu));
    EXPECT_TRUE(std::isnan(row.teacher_val_mae));
  }
  EXPECT_EQ(r.rows.back().step, aligned_step(cfg.total_steps, cfg.compute_ratio));
}

TEST(Harness, FrozenStudentKeepsItsState) {
  auto cfg = small_irt();
  cfg.student_frozen = true;
  const auto r = run_experiment(cfg, RunMode::Goldilocks);
  EXPECT_EQ(r.student_hash, IrtStudent(cfg.irt).state_hash());
  cfg.student_frozen = false;
  EXPECT_NE(run_experiment(cfg, RunMode::Goldilocks).student_hash, r.student_hash);
}

TEST(Harness, SinkSeesEveryRowOnceInOrder) {
  const auto cfg = small_irt();
  std::vector<MetricsRecord> seen;
  RunOptions opts;
  opts.sink = [&](std::span<const MetricsRecord> rows) { seen.insert(seen.end(), rows.begin(), rows.end()); };
  const auto r = run_experiment(cfg, RunMode::Goldilocks, opts);
  EXPECT_EQ(csv_of(seen), csv_of(r.rows));
}

TEST(Harness, DapoRedrawsZeroVarianceGroups) {
  auto cfg = load_config(std::string(GOLDILOCKS_CONFIG_DIR) + "/arithmetic_policy.conf");
  cfg.dataset.size = 100;
  cfg.validation_size = 20;
  cfg.total_steps = 5;
  cfg.eval_every = 5;
  cfg.batch_size = 6;
  cfg.group_size = 4;
  cfg.loss.variant = LossVariant::Dapo;
  cfg.loss.dapo_max_resamples = 0;
  const auto none = run_experiment(cfg, RunMode::Baseline);
  int zero_rows = 0;
  for (const auto& row : none.rows) {
    if (row.zero_variance) {
      ++zero_rows;
      EXPECT_EQ(row.grad_norm, 0.0);
    }
  }
  ASSERT_GT(zero_rows, 0);

  cfg.loss.dapo_max_resamples = 64;
  const auto redrawn = run_experiment(cfg, RunMode::Baseline);
  int trained = 0;
  for (const auto& row : redrawn.rows) trained += row.zero_variance && row.grad_norm > 0.0;
  EXPECT_GT(trained, 0);
}

TEST(Harness, PendingQuestionsAtShutdownAreAnError) {
  struct Leaky final : QuestionSource {
    std::vector<Question> data = generate_dataset(DatasetSpec{}, 4);
    SampleReply request_sample() override { return {data[0], kMissing, kMissing, {}, {}}; }
    FeedbackAck send_feedback(QuestionId, const std::vector<int>&) override { return {}; }
    ShutdownAck shutdown() override { return {{data[0].id}, {}}; }
    std::uint64_t teacher_calls() const override { return 0; }
  } leaky;
  auto cfg = small_irt();
  cfg.total_steps = 1;
  cfg.eval_every = 1;
  EXPECT_THROW(run_with_source(cfg, RunMode::Goldilocks, leaky), Error);
}

// --- comparison and report ------------------------------------------------------

TEST(Report, WritesCsvsAndSevenCharts) {
  const auto cfg = small_irt();
  const auto g = run_experiment(cfg, RunMode::Goldilocks);
  const auto b = run_experiment(cfg, RunMode::Baseline);
  const auto dir = scratch_dir("report");
  const auto files = emit_report(g.rows, b.rows, dir, {cfg.compute_ratio, cfg.ema_alpha});
  int svgs = 0;
  for (const auto& f : files) {
    EXPECT_TRUE(fs::exists(f)) << f;
    EXPECT_GT(fs::file_size(f), 0u);
    if (f.extension() == ".svg") {
      ++svgs;
      std::ifstream is(f);
      std::string first;
      std::getline(is, first);
      EXPECT_NE(first.find("<svg"), std::string::npos) << f;
    }
  }
  EXPECT_EQ(svgs, 7);
  EXPECT_TRUE(fs::exists(dir / "aligned.csv"));
  EXPECT_EQ(csv_of(read_csv(dir / "goldilocks.csv")), csv_of(g.rows));
  fs::remove_all(dir);
}

TEST(Report, EmptyInputLeavesNoFiles) {
  const auto g = run_experiment(small_irt(), RunMode::Goldilocks);
  const auto dir = scratch_dir("empty_report");
  fs::create_directories(dir);
  try {
    emit_report(g.rows, {}, dir);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyReport);
  }
  EXPECT_TRUE(fs::is_empty(dir));
  // a baseline too short to align is refused before anything is written
  std::vector<MetricsRecord> short_baseline(g.rows.begin(), g.rows.begin() + 4);
  EXPECT_THROW(emit_report(g.rows, short_baseline, dir), Error);
  EXPECT_TRUE(fs::is_empty(dir));
  fs::remove_all(dir);
}

TEST(Report, ComparisonSummaryUsesAlignedEndpoint) {
  auto cfg = small_irt();
  const auto g = run_experiment(cfg, RunMode::Goldilocks);
  const auto b = run_experiment(cfg, RunMode::Baseline);
  const auto s = summarize_comparison(g.rows, b.rows, cfg.compute_ratio, cfg.ema_alpha, 10);
  EXPECT_EQ(s.window_start, 21);
  EXPECT_DOUBLE_EQ(s.goldilocks_final_accuracy, final_accuracy(g.rows, 5));
  EXPECT_DOUBLE_EQ(s.baseline_final_accuracy, final_accuracy(b.rows, 5, aligned_step(30, cfg.compute_ratio)));
  EXPECT_GE(s.goldilocks_zero_variance, 0.0);
  EXPECT_LE(s.goldilocks_zero_variance, 1.0);
  EXPECT_THROW(summarize_comparison(g.rows, {}, cfg.compute_ratio, 0.9), Error);
}
