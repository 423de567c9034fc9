// SPDX-License-Identifier: Apache-2.0
#pragma once

// Experiment loop. Each step the student takes `batch_size` questions from a
// QuestionSource, draws G rollouts per question, reports the verification
// rewards back, accumulates its loss gradient, and applies one update.
//
// Sources: the teacher (in process or over a socket, same messages) for the
// goldilocks arm; a seeded uniform sampler for the baseline arm. The
// baseline runs round(ratio * total_steps) steps and validates at
// round(ratio * m * eval_every), so its rows align with goldilocks steps
// under normalized_compare.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "goldilocks/config.hpp"
#include "goldilocks/dataset.hpp"
#include "goldilocks/error.hpp"
#include "goldilocks/grpo_core.hpp"
#include "goldilocks/metrics.hpp"
#include "goldilocks/protocol.hpp"
#include "goldilocks/rng.hpp"
#include "goldilocks/students.hpp"
#include "goldilocks/teacher.hpp"
#include "goldilocks/teacher_service.hpp"

namespace goldilocks {

// ---------------------------------------------------------------------------
// Question sources
// ---------------------------------------------------------------------------

struct SampleReply {
  Question question;
  double teacher_mu = kMissing;
  double teacher_sigma = kMissing;
  std::optional<std::uint64_t> model_version;
  std::vector<UpdateSummary> reports;
};

struct FeedbackAck {
  bool update_scheduled = false;
};

struct ShutdownAck {
  std::vector<QuestionId> pending;
  std::vector<UpdateSummary> reports;
};

class QuestionSource {
 public:
  virtual ~QuestionSource() = default;
  virtual SampleReply request_sample() = 0;
  virtual FeedbackAck send_feedback(QuestionId id, const std::vector<int>& rewards) = 0;
  virtual ShutdownAck shutdown() = 0;
  /// Number of calls that reached a teacher.
  virtual std::uint64_t teacher_calls() const = 0;
};

/// Speaks the wire protocol; subclasses supply one request/reply exchange.
/// Error replies are raised as Error with the code the teacher sent.
class MessageSource : public QuestionSource {
 public:
  SampleReply request_sample() override {
    WireMessage m;
    m.type = MessageType::RequestSample;
    const WireMessage r = call(m, MessageType::Sample);
    ++calls_;
    SampleReply out;
    out.question = *r.payload;
    out.teacher_mu = r.teacher_mu.value_or(kMissing);
    out.teacher_sigma = r.teacher_sigma.value_or(kMissing);
    out.model_version = r.model_version;
    out.reports = r.reports;
    return out;
  }

  FeedbackAck send_feedback(QuestionId id, const std::vector<int>& rewards) override {
    WireMessage m;
    m.type = MessageType::Feedback;
    m.question_id = id;
    m.rewards = rewards;
    const WireMessage r = call(m, MessageType::Ack);
    ++calls_;
    return {r.update_scheduled.value_or(false)};
  }

  ShutdownAck shutdown() override {
    WireMessage m;
    m.type = MessageType::Shutdown;
    const WireMessage r = call(m, MessageType::Ack);
    return {r.pending.value_or(std::vector<QuestionId>{}), r.reports};
  }

  std::uint64_t teacher_calls() const override { return calls_; }

 protected:
  virtual WireMessage exchange(const WireMessage& request) = 0;

 private:
  WireMessage call(WireMessage m, MessageType expected) {
    m.seq = ++seq_;
    WireMessage r = exchange(m);
    if (r.type == MessageType::Error) {
      throw Error(error_code_from_string(r.error.value_or("protocol")), "teacher: " + r.reason.value_or(""));
    }
    if (r.type != expected || r.reply_to != m.seq) {
      throw Error(ErrorCode::Protocol, "unexpected reply '" + to_string(r.type) + "' to frame " + std::to_string(m.seq));
    }
    return r;
  }

  std::uint64_t seq_ = 0;
  std::uint64_t calls_ = 0;
};

/// In-process connection to a TeacherService. Optionally records the frames
/// ("> " student to teacher, "< " teacher to student), one per line.
class LocalTeacherSource final : public MessageSource {
 public:
  LocalTeacherSource(TeacherService& service, std::ostream* transcript = nullptr)
      : service_(service), conn_(service.open_session()), transcript_(transcript) {}

  ConnectionId connection() const noexcept { return conn_; }

 protected:
  WireMessage exchange(const WireMessage& request) override {
    const std::string line = encode(request);
    if (transcript_) *transcript_ << "> " << line << '\n';
    const WireMessage reply = service_.handle_line(conn_, line);
    const std::string out = encode(reply);
    if (transcript_) *transcript_ << "< " << out << '\n';
    service_.run_scheduled_update();
    return decode(out);
  }

 private:
  TeacherService& service_;
  ConnectionId conn_;
  std::ostream* transcript_;
};

/// Baseline arm: uniform over the dataset, no teacher.
class UniformSource final : public QuestionSource {
 public:
  UniformSource(std::span<const Question> dataset, std::uint64_t seed) : dataset_(dataset), seed_(seed) {
    if (dataset_.empty()) throw Error(ErrorCode::InvalidInput, "dataset is empty");
  }

  SampleReply request_sample() override {
    Rng rng{stream::kBaseline, seed_, draws_++};
    SampleReply out;
    out.question = dataset_[static_cast<std::size_t>(rng.below(dataset_.size()))];
    pending_.insert(out.question.id);
    return out;
  }

  FeedbackAck send_feedback(QuestionId id, const std::vector<int>&) override {
    auto it = pending_.find(id);
    if (it == pending_.end()) throw Error(ErrorCode::UnknownQuestion, "question " + std::to_string(id) + " is not pending");
    pending_.erase(it);
    return {};
  }

  ShutdownAck shutdown() override { return {std::vector<QuestionId>(pending_.begin(), pending_.end()), {}}; }

  std::uint64_t teacher_calls() const override { return 0; }

 private:
  std::span<const Question> dataset_;
  std::uint64_t seed_;
  std::uint64_t draws_ = 0;
  std::multiset<QuestionId> pending_;
};

// ---------------------------------------------------------------------------
// One request / rollout / feedback cycle
// ---------------------------------------------------------------------------

struct ClientStepResult {
  SampleReply sample;
  RolloutResult rollout;
  FeedbackAck ack;
};

/// Requests a question, draws G rollouts, and reports the verification
/// rewards. The student is only read; gradient accumulation is the caller's.
template <StudentBackend S>
ClientStepResult client_step(QuestionSource& source, const S& student, const RewardConfig& reward_cfg,
                             std::size_t group_size, std::int64_t step, std::uint64_t student_seed,
                             std::uint64_t slot) {
  ClientStepResult out;
  out.sample = source.request_sample();
  out.rollout = student.rollout(out.sample.question, group_size, step, reward_cfg, student_seed, slot);
  out.ack = source.send_feedback(out.sample.question.id, out.rollout.group.rewards_ver);
  return out;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct Schedule {
  std::int64_t total_steps = 0;
  std::set<std::int64_t> eval_steps;

  static Schedule goldilocks(const ExperimentConfig& cfg) {
    Schedule s;
    s.total_steps = cfg.total_steps;
    for (std::int64_t m = cfg.eval_every; m <= cfg.total_steps; m += cfg.eval_every) s.eval_steps.insert(m);
    return s;
  }

  static Schedule baseline(const ExperimentConfig& cfg) {
    Schedule s;
    s.total_steps = aligned_step(cfg.total_steps, cfg.compute_ratio);
    for (std::int64_t m = cfg.eval_every; m <= cfg.total_steps; m += cfg.eval_every) {
      s.eval_steps.insert(aligned_step(m, cfg.compute_ratio));
    }
    return s;
  }

  static Schedule for_mode(const ExperimentConfig& cfg, RunMode mode) {
    return mode == RunMode::Goldilocks ? goldilocks(cfg) : baseline(cfg);
  }
};

/// Receives rows once they are final (a row's teacher MAE can arrive with the
/// following reply).
using RowSink = std::function<void(std::span<const MetricsRecord>)>;

namespace detail {
inline void attach_reports(std::vector<MetricsRecord>& rows, const std::vector<UpdateSummary>& reports) {
  if (reports.empty() || rows.empty()) return;
  rows.back().teacher_val_mae = reports.back().unseen_mae;
}

inline std::uint64_t resample_slot(std::uint64_t slot, int attempt) {
  return slot | (static_cast<std::uint64_t>(attempt) << 32);
}
}  // namespace detail

template <StudentBackend S>
std::vector<MetricsRecord> train_student(S& student, QuestionSource& source, const ExperimentConfig& cfg,
                                         std::span<const Question> validation, const Schedule& schedule,
                                         const RowSink& sink = {}) {
  std::vector<MetricsRecord> rows;
  std::size_t flushed = 0;
  auto flush_upto = [&](std::size_t n) {
    if (sink && n > flushed) sink(std::span<const MetricsRecord>(rows).subspan(flushed, n - flushed));
    flushed = std::max(flushed, n);
  };

  for (std::int64_t step = 1; step <= schedule.total_steps; ++step) {
    for (std::size_t slot = 0; slot < cfg.batch_size; ++slot) {
      ClientStepResult cs = client_step(source, student, cfg.reward, cfg.group_size, step, cfg.seeds.student, slot);
      detail::attach_reports(rows, cs.sample.reports);
      flush_upto(rows.size());

      const Question& q = cs.sample.question;
      const AdvantageSet adv = group_advantages(cs.rollout.group);

      // DAPO trains only on mixed groups: redraw the same question.
      RolloutResult train = cs.rollout;
      AdvantageSet train_adv = adv;
      if (cfg.loss.variant == LossVariant::Dapo) {
        for (int attempt = 1; attempt <= cfg.loss.dapo_max_resamples && train_adv.zero_variance(); ++attempt) {
          train = student.rollout(q, cfg.group_size, step, cfg.reward, cfg.seeds.student,
                                  detail::resample_slot(slot, attempt));
          train_adv = group_advantages(train.group);
        }
      }
      const double grad_norm = student.accumulate(q, train_adv, train.sampled, cfg.loss);

      MetricsRecord row;
      row.step = step;
      row.slot = static_cast<std::int64_t>(slot);
      row.question_id = q.id;
      row.mean_reward = adv.empirical_p;
      row.reward_std = adv.group_std;
      row.zero_variance = adv.zero_variance() ? 1 : 0;
      row.grad_norm = grad_norm;
      row.teacher_mu = cs.sample.teacher_mu;
      row.teacher_sigma = cs.sample.teacher_sigma;
      rows.push_back(row);
    }
    if (cfg.student_frozen) {
      student.discard_update();
    } else {
      student.apply_update();
    }
    if (schedule.eval_steps.count(step)) rows.back().validation_accuracy = student.evaluate(validation);
    if (!rows.empty()) flush_upto(rows.size() - 1);
  }
  const ShutdownAck bye = source.shutdown();
  detail::attach_reports(rows, bye.reports);
  if (!bye.pending.empty()) {
    throw Error(ErrorCode::Protocol, std::to_string(bye.pending.size()) + " served questions never fed back");
  }
  flush_upto(rows.size());
  return rows;
}

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

using Student = std::variant<IrtStudent, PolicyStudent>;

inline Student make_student(const ExperimentConfig& cfg) {
  if (cfg.student_kind == StudentKind::Irt) return IrtStudent(cfg.irt);
  return PolicyStudent(cfg.dataset_spec().feature_dim(), cfg.policy_config(), cfg.seeds.student);
}

inline std::vector<Question> make_validation(const ExperimentConfig& cfg) {
  return generate_validation(cfg.dataset_spec(), cfg.validation_size);
}

inline Teacher make_teacher(const ExperimentConfig& cfg) {
  auto model = TeacherModel::initialized(cfg.dataset_spec().feature_dim(), cfg.teacher, cfg.seeds.teacher);
  return Teacher(std::move(model), cfg.teacher, cfg.seeds.teacher);
}

inline TeacherService make_teacher_service(const ExperimentConfig& cfg, std::vector<Question> dataset) {
  return TeacherService(make_teacher(cfg), std::move(dataset), cfg.group_size, cfg.seeds.selection);
}

inline TeacherService make_teacher_service(const ExperimentConfig& cfg) {
  return make_teacher_service(cfg, generate_dataset(cfg.dataset_spec()));
}

struct RunResult {
  RunMode mode = RunMode::Goldilocks;
  std::vector<MetricsRecord> rows;
  std::uint64_t teacher_calls = 0;
  bool teacher_constructed = false;
  std::uint64_t student_hash = 0;
  std::optional<TeacherModel> teacher_model;
};

/// Runs the student against an existing source (used for the socket client).
inline RunResult run_with_source(const ExperimentConfig& cfg, RunMode mode, QuestionSource& source,
                                 const RowSink& sink = {}) {
  cfg.validate();
  const auto validation = make_validation(cfg);
  Student student = make_student(cfg);
  RunResult out;
  out.mode = mode;
  std::visit(
      [&](auto& s) {
        out.rows = train_student(s, source, cfg, validation, Schedule::for_mode(cfg, mode), sink);
        out.student_hash = s.state_hash();
      },
      student);
  out.teacher_calls = source.teacher_calls();
  return out;
}

struct RunOptions {
  std::ostream* transcript = nullptr;
  RowSink sink;
  std::optional<std::vector<Question>> dataset;  // generated from the config when empty
};

inline RunResult run_experiment(const ExperimentConfig& cfg, RunMode mode, const RunOptions& opts = {}) {
  cfg.validate();
  auto dataset = opts.dataset ? *opts.dataset : generate_dataset(cfg.dataset_spec());
  if (mode == RunMode::Baseline) {
    UniformSource source(dataset, cfg.seeds.selection);
    return run_with_source(cfg, mode, source, opts.sink);
  }
  TeacherService service = make_teacher_service(cfg, std::move(dataset));
  LocalTeacherSource source(service, opts.transcript);
  RunResult out = run_with_source(cfg, mode, source, opts.sink);
  out.teacher_constructed = true;
  out.teacher_calls = service.teacher_calls();
  out.teacher_model = service.teacher().model();
  return out;
}

// ---------------------------------------------------------------------------
// Paired comparison
// ---------------------------------------------------------------------------

struct ComparisonSummary {
  double goldilocks_final_accuracy = kMissing;
  double baseline_final_accuracy = kMissing;
  double goldilocks_zero_variance = kMissing;  // mean EMA fraction over the window
  double baseline_zero_variance = kMissing;    // same, at aligned steps
  double goldilocks_mean_reward = kMissing;    // mean training reward over the window
  double baseline_mean_reward = kMissing;
  std::int64_t window_start = 0;
};

/// Aligned rows for one column, EMA-smoothed per arm before alignment.
inline std::vector<AlignedRow> aligned_series(const std::vector<MetricsRecord>& goldilocks,
                                              const std::vector<MetricsRecord>& baseline, Column column,
                                              Ratio ratio, std::optional<double> ema_alpha) {
  auto g = step_means(goldilocks, column);
  auto b = step_means(baseline, column);
  if (ema_alpha) {
    g = ema(g, *ema_alpha);
    b = ema(b, *ema_alpha);
  }
  return normalized_compare(g, b, ratio);
}

/// Window statistics over goldilocks steps (total - window, total].
inline ComparisonSummary summarize_comparison(const std::vector<MetricsRecord>& goldilocks,
                                              const std::vector<MetricsRecord>& baseline, Ratio ratio,
                                              double ema_alpha, std::int64_t window = 500) {
  if (goldilocks.empty() || baseline.empty()) throw Error(ErrorCode::EmptyReport, "comparison needs both arms");
  ComparisonSummary s;
  const std::int64_t last = goldilocks.back().step;
  s.window_start = std::max<std::int64_t>(1, last - window + 1);

  const auto zv = aligned_series(goldilocks, baseline, Column::ZeroVariance, ratio, ema_alpha);
  const auto mr = aligned_series(goldilocks, baseline, Column::MeanReward, ratio, std::nullopt);
  double zg = 0, zb = 0, rg = 0, rb = 0;
  int n = 0;
  for (std::size_t i = 0; i < zv.size(); ++i) {
    if (zv[i].step < s.window_start) continue;
    zg += zv[i].goldilocks;
    zb += zv[i].baseline;
    rg += mr[i].goldilocks;
    rb += mr[i].baseline;
    ++n;
  }
  s.goldilocks_zero_variance = zg / n;
  s.baseline_zero_variance = zb / n;
  s.goldilocks_mean_reward = rg / n;
  s.baseline_mean_reward = rb / n;
  s.goldilocks_final_accuracy = final_accuracy(goldilocks, 5);
  s.baseline_final_accuracy = final_accuracy(baseline, 5, aligned_step(last, ratio));
  return s;
}

}  // namespace goldilocks
