// SPDX-License-Identifier: Apache-2.0
#pragma once

// Utility predictor f(q) = 0.5 * sigmoid(w . pool(encode(q)) + b), trained
// online on (question, sqrt(p_hat (1 - p_hat))) pairs from a sliding-window
// replay buffer, and the epsilon-greedy selection rule that uses it.
//
// The encoder splits the feature vector into `positions` equal chunks,
// applies h = tanh(W x + c) to each, and pools with either the mean or the
// last chunk.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "goldilocks/dataset.hpp"
#include "goldilocks/error.hpp"
#include "goldilocks/grpo_core.hpp"
#include "goldilocks/rng.hpp"

namespace goldilocks {

enum class Pooling { Mean, LastPosition };
enum class TeacherOptimizer { Sgd, Momentum, Adam };

/// Learning rate used for the billion-parameter backbone; far too small for
/// the desk-scale encoder, kept for reference runs.
inline constexpr double kBackboneTeacherLearnRate = 1e-6;

struct TeacherConfig {
  std::size_t candidate_size = 8;
  double epsilon = 0.2;
  std::size_t replay_capacity = 64;
  std::size_t update_every = 4;
  std::size_t epochs_per_update = 4;
  std::size_t batch_size = 8;
  double learn_rate = 1e-3;
  double temperature_tau = 1.0;  // accepted for interface parity; selection never reads it
  std::size_t hidden_dim = 16;
  std::size_t positions = 1;
  Pooling pooling = Pooling::Mean;
  TeacherOptimizer optimizer = TeacherOptimizer::Sgd;
  double momentum = 0.9;
  double init_scale = 1.0;

  void validate() const {
    if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw Error(ErrorCode::Config, "teacher.epsilon must lie in [0, 1]");
    if (candidate_size == 0) throw Error(ErrorCode::Config, "teacher.candidate_size must be positive");
    if (replay_capacity == 0) throw Error(ErrorCode::Config, "teacher.replay_capacity must be positive");
    if (update_every == 0) throw Error(ErrorCode::Config, "teacher.update_every must be positive");
    if (epochs_per_update == 0) throw Error(ErrorCode::Config, "teacher.epochs_per_update must be positive");
    if (batch_size == 0) throw Error(ErrorCode::Config, "teacher.batch_size must be positive");
    if (hidden_dim == 0) throw Error(ErrorCode::Config, "teacher.hidden_dim must be positive");
    if (positions == 0) throw Error(ErrorCode::Config, "teacher.positions must be positive");
    if (!(learn_rate > 0.0)) throw Error(ErrorCode::Config, "teacher.learn_rate must be positive");
  }
};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

class TeacherModel {
 public:
  /// Pre-activation clamp keeping predictions strictly inside (0, 0.5).
  static constexpr double kLogitLimit = 30.0;

  TeacherModel() = default;
  TeacherModel(std::size_t feature_dim, std::size_t hidden_dim, std::size_t positions, Pooling pooling)
      : feature_dim_(feature_dim), hidden_(hidden_dim), positions_(positions), pooling_(pooling) {
    if (positions == 0 || feature_dim == 0 || feature_dim % positions != 0) {
      throw Error(ErrorCode::ShapeMismatch, "feature_dim must be a positive multiple of positions");
    }
    token_dim_ = feature_dim / positions;
    params_.assign(hidden_ * token_dim_ + hidden_ + hidden_ + 1, 0.0);
  }

  static TeacherModel initialized(std::size_t feature_dim, const TeacherConfig& cfg, std::uint64_t seed) {
    TeacherModel m(feature_dim, cfg.hidden_dim, cfg.positions, cfg.pooling);
    Rng rng{stream::kInit, seed};
    const double enc_scale = cfg.init_scale / std::sqrt(static_cast<double>(m.token_dim_));
    for (std::size_t i = 0; i < m.hidden_ * m.token_dim_; ++i) m.params_[i] = enc_scale * rng.normal();
    for (std::size_t i = 0; i < m.hidden_; ++i) m.params_[m.enc_bias_offset() + i] = 0.5 * cfg.init_scale * rng.normal();
    // head starts at zero: every prediction is 0.25 until the first update
    return m;
  }

  std::size_t feature_dim() const noexcept { return feature_dim_; }
  std::size_t hidden_dim() const noexcept { return hidden_; }
  std::size_t positions() const noexcept { return positions_; }
  Pooling pooling() const noexcept { return pooling_; }
  std::size_t parameter_count() const noexcept { return params_.size(); }
  std::span<double> parameters() noexcept { return params_; }
  std::span<const double> parameters() const noexcept { return params_; }

  std::span<double> head_weights() noexcept { return {params_.data() + head_offset(), hidden_}; }
  double& head_bias() noexcept { return params_[params_.size() - 1]; }

  /// Pre-sigmoid score z = w . pooled + b (unclamped).
  double logit(std::span<const double> features) const {
    check(features);
    const auto pooled = pooled_embedding(features);
    double z = params_.back();
    for (std::size_t j = 0; j < hidden_; ++j) z += params_[head_offset() + j] * pooled[j];
    return z;
  }

  double predict(std::span<const double> features) const {
    const double z = std::clamp(logit(features), -kLogitLimit, kLogitLimit);
    return 0.5 * sigmoid(z);
  }

  double predict(const Question& q) const { return predict(q.features); }

  /// grad += scale * d predict / d params.
  void accumulate_prediction_gradient(std::span<const double> features, double scale, std::span<double> grad) const {
    check(features);
    if (grad.size() != params_.size()) throw Error(ErrorCode::ShapeMismatch, "gradient buffer size mismatch");
    const auto used = used_positions();
    const double inv = 1.0 / static_cast<double>(used.second - used.first);
    std::vector<double> pooled(hidden_, 0.0);
    std::vector<std::vector<double>> acts;
    for (std::size_t p = used.first; p < used.second; ++p) {
      acts.push_back(encode_position(features, p));
      for (std::size_t j = 0; j < hidden_; ++j) pooled[j] += acts.back()[j] * inv;
    }
    double z = params_.back();
    for (std::size_t j = 0; j < hidden_; ++j) z += params_[head_offset() + j] * pooled[j];
    if (z > kLogitLimit || z < -kLogitLimit) return;  // clamped: flat
    const double s = sigmoid(z);
    const double dz = scale * 0.5 * s * (1.0 - s);
    grad[params_.size() - 1] += dz;
    for (std::size_t j = 0; j < hidden_; ++j) grad[head_offset() + j] += dz * pooled[j];
    for (std::size_t k = 0; k < acts.size(); ++k) {
      const std::size_t p = used.first + k;
      const double* x = features.data() + p * token_dim_;
      for (std::size_t j = 0; j < hidden_; ++j) {
        const double h = acts[k][j];
        const double dpre = dz * params_[head_offset() + j] * inv * (1.0 - h * h);
        if (dpre == 0.0) continue;
        grad[enc_bias_offset() + j] += dpre;
        double* row = &grad[j * token_dim_];
        for (std::size_t i = 0; i < token_dim_; ++i) row[i] += dpre * x[i];
      }
    }
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"format", "goldilocks-teacher"},
                          {"version", 1},
                          {"feature_dim", feature_dim_},
                          {"hidden_dim", hidden_},
                          {"positions", positions_},
                          {"pooling", pooling_ == Pooling::Mean ? "mean" : "last_position"},
                          {"parameters", params_}};
  }

  static TeacherModel from_json(const nlohmann::json& j) {
    try {
      if (j.at("format").get<std::string>() != "goldilocks-teacher" || j.at("version").get<int>() != 1) {
        throw Error(ErrorCode::InvalidInput, "unsupported teacher checkpoint format/version");
      }
      const auto pooling = j.at("pooling").get<std::string>() == "mean" ? Pooling::Mean : Pooling::LastPosition;
      TeacherModel m(j.at("feature_dim").get<std::size_t>(), j.at("hidden_dim").get<std::size_t>(),
                     j.at("positions").get<std::size_t>(), pooling);
      auto p = j.at("parameters").get<std::vector<double>>();
      if (p.size() != m.params_.size()) throw Error(ErrorCode::ShapeMismatch, "checkpoint parameter count mismatch");
      m.params_ = std::move(p);
      return m;
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::InvalidInput, std::string("bad teacher checkpoint: ") + e.what());
    }
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error(ErrorCode::Io, "cannot write " + path.string());
    os << to_json().dump(1) << '\n';
  }

  static TeacherModel load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error(ErrorCode::Io, "cannot read " + path.string());
    try {
      return from_json(nlohmann::json::parse(is));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::InvalidInput, std::string("bad teacher checkpoint: ") + e.what());
    }
  }

 private:
  static double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  }

  void check(std::span<const double> features) const {
    if (features.size() != feature_dim_) {
      throw Error(ErrorCode::ShapeMismatch, "teacher expects " + std::to_string(feature_dim_) + " features, got " +
                                                std::to_string(features.size()));
    }
  }

  std::size_t enc_bias_offset() const noexcept { return hidden_ * token_dim_; }
  std::size_t head_offset() const noexcept { return hidden_ * token_dim_ + hidden_; }

  std::pair<std::size_t, std::size_t> used_positions() const noexcept {
    return pooling_ == Pooling::Mean ? std::pair{std::size_t{0}, positions_} : std::pair{positions_ - 1, positions_};
  }

  std::vector<double> encode_position(std::span<const double> features, std::size_t p) const {
    std::vector<double> h(hidden_);
    const double* x = features.data() + p * token_dim_;
    for (std::size_t j = 0; j < hidden_; ++j) {
      double a = params_[enc_bias_offset() + j];
      const double* row = &params_[j * token_dim_];
      for (std::size_t i = 0; i < token_dim_; ++i) a += row[i] * x[i];
      h[j] = std::tanh(a);
    }
    return h;
  }

  std::vector<double> pooled_embedding(std::span<const double> features) const {
    const auto used = used_positions();
    const double inv = 1.0 / static_cast<double>(used.second - used.first);
    std::vector<double> pooled(hidden_, 0.0);
    for (std::size_t p = used.first; p < used.second; ++p) {
      const auto h = encode_position(features, p);
      for (std::size_t j = 0; j < hidden_; ++j) pooled[j] += h[j] * inv;
    }
    return pooled;
  }

  std::size_t feature_dim_ = 0;
  std::size_t hidden_ = 0;
  std::size_t positions_ = 1;
  std::size_t token_dim_ = 0;
  Pooling pooling_ = Pooling::Mean;
  // layout: encoder W (hidden x token_dim), encoder c (hidden), head w (hidden), head b
  std::vector<double> params_;
};

inline double predict_utility(const TeacherModel& model, const Question& q) { return model.predict(q); }

struct TrainingPair {
  std::span<const double> features;
  double target = 0.0;
};

/// L = (1/|B|) sum (f(q) - y)^2 and its gradient.
inline LossAndGradient mse_loss_and_gradient(const TeacherModel& model, std::span<const TrainingPair> batch) {
  LossAndGradient out;
  out.gradient.assign(model.parameter_count(), 0.0);
  if (batch.empty()) return out;
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (const auto& s : batch) {
    const double err = model.predict(s.features) - s.target;
    out.loss += err * err * inv;
    model.accumulate_prediction_gradient(s.features, 2.0 * err * inv, out.gradient);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Replay buffer
// ---------------------------------------------------------------------------

struct ReplaySample {
  QuestionId question_id = 0;
  std::vector<double> features;
  double target = 0.0;
  std::uint64_t inserted_at = 0;
  bool trained = false;  // has taken part in an update pass
};

class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity = 64) : capacity_(capacity) {
    if (capacity == 0) throw Error(ErrorCode::Config, "replay capacity must be positive");
  }

  /// Appends and evicts the oldest sample when over capacity.
  void push(QuestionId id, std::vector<double> features, double target) {
    samples_.push_back(ReplaySample{id, std::move(features), target, next_insert_++, false});
    if (samples_.size() > capacity_) samples_.pop_front();
  }

  std::size_t size() const noexcept { return samples_.size(); }
  std::size_t capacity() const noexcept { return capacity_; }
  bool empty() const noexcept { return samples_.empty(); }
  std::uint64_t insertions() const noexcept { return next_insert_; }
  const std::deque<ReplaySample>& samples() const noexcept { return samples_; }
  std::deque<ReplaySample>& samples() noexcept { return samples_; }

 private:
  std::size_t capacity_;
  std::uint64_t next_insert_ = 0;
  std::deque<ReplaySample> samples_;
};

/// Pushes (q, sqrt(p_hat (1 - p_hat))) and returns the target.
inline double record_feedback(ReplayBuffer& buffer, const Question& q, const RolloutGroup& group) {
  if (group.group_size() == 0) throw Error(ErrorCode::InvalidGroup, "empty rollout group");
  const double p_hat = static_cast<double>(group.correct_count()) / static_cast<double>(group.group_size());
  const double target = utility_score(p_hat);
  buffer.push(q.id, q.features, target);
  return target;
}

// ---------------------------------------------------------------------------
// Selection
// ---------------------------------------------------------------------------

struct Selection {
  std::size_t index = 0;                  // into the dataset
  std::vector<std::size_t> candidates;    // dataset indices
  std::vector<double> predictions;        // aligned with candidates
  bool explored = false;                  // true when the epsilon branch fired
};

/// K distinct indices in [0, n) (Floyd's algorithm).
inline std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> out;
  out.reserve(k);
  for (std::size_t j = n - k; j < n; ++j) {
    const std::size_t t = static_cast<std::size_t>(rng.below(j + 1));
    if (std::find(out.begin(), out.end(), t) == out.end()) {
      out.push_back(t);
    } else {
      out.push_back(j);
    }
  }
  return out;
}

/// Draws K candidates, scores them, and returns a uniform candidate with
/// probability epsilon, else the argmax (ties: smallest question id).
inline Selection select_query(const TeacherModel& model, std::span<const Question> dataset, const TeacherConfig& cfg,
                              Rng& rng) {
  const std::size_t k = cfg.candidate_size;
  if (dataset.size() < k || k == 0) {
    throw Error(ErrorCode::InsufficientCandidates,
                "dataset has " + std::to_string(dataset.size()) + " questions, need " + std::to_string(k));
  }
  Selection sel;
  sel.candidates = sample_without_replacement(dataset.size(), k, rng);
  sel.predictions.reserve(k);
  for (auto idx : sel.candidates) sel.predictions.push_back(model.predict(dataset[idx]));
  const double r = rng.uniform();
  if (r < cfg.epsilon) {
    sel.explored = true;
    sel.index = sel.candidates[static_cast<std::size_t>(rng.below(k))];
    return sel;
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < k; ++i) {
    const double a = sel.predictions[i];
    const double b = sel.predictions[best];
    if (a > b || (a == b && dataset[sel.candidates[i]].id < dataset[sel.candidates[best]].id)) best = i;
  }
  sel.index = sel.candidates[best];
  return sel;
}

inline Selection select_query(const TeacherModel& model, std::span<const Question> dataset, const TeacherConfig& cfg,
                              std::uint64_t seed) {
  Rng rng(seed);
  return select_query(model, dataset, cfg, rng);
}

struct PredictionStats {
  double mean = 0.0;
  double std = 0.0;
};

inline PredictionStats summarize(std::span<const double> values) {
  if (values.empty()) throw Error(ErrorCode::InvalidInput, "no predictions to summarize");
  PredictionStats s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(ss / static_cast<double>(values.size()));
  return s;
}

/// Mean and population std of the predictions over `candidates`.
inline PredictionStats prediction_stats(const TeacherModel& model, std::span<const Question> candidates) {
  if (candidates.empty()) throw Error(ErrorCode::InvalidInput, "candidate list is empty");
  std::vector<double> p;
  p.reserve(candidates.size());
  for (const auto& q : candidates) p.push_back(model.predict(q));
  return summarize(p);
}

// ---------------------------------------------------------------------------
// Online refinement
// ---------------------------------------------------------------------------

struct UpdateReport {
  std::uint64_t update_index = 0;  // 1-based count of completed updates
  std::vector<double> epoch_mse;
  std::size_t unseen_count = 0;
  double unseen_mae = std::numeric_limits<double>::quiet_NaN();
  std::size_t buffer_size = 0;
  bool skipped = false;
  std::string warning;
};

struct OptimizerState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t t = 0;
};

inline void optimizer_step(std::span<double> params, std::span<const double> grad, const TeacherConfig& cfg,
                           OptimizerState& st) {
  if (st.m.size() != params.size()) st.m.assign(params.size(), 0.0);
  switch (cfg.optimizer) {
    case TeacherOptimizer::Sgd:
      for (std::size_t i = 0; i < params.size(); ++i) params[i] -= cfg.learn_rate * grad[i];
      break;
    case TeacherOptimizer::Momentum:
      for (std::size_t i = 0; i < params.size(); ++i) {
        st.m[i] = cfg.momentum * st.m[i] + grad[i];
        params[i] -= cfg.learn_rate * st.m[i];
      }
      break;
    case TeacherOptimizer::Adam: {
      constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
      if (st.v.size() != params.size()) st.v.assign(params.size(), 0.0);
      ++st.t;
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.t));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.t));
      for (std::size_t i = 0; i < params.size(); ++i) {
        st.m[i] = b1 * st.m[i] + (1.0 - b1) * grad[i];
        st.v[i] = b2 * st.v[i] + (1.0 - b2) * grad[i] * grad[i];
        params[i] -= cfg.learn_rate * (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + eps);
      }
      break;
    }
  }
}

/// One refinement pass: shuffle the buffer once, cut it into mini-batches,
/// and run `epochs_per_update` epochs of gradient descent on the batch MSE.
/// The unseen-sample MAE is taken from the first-epoch forward passes of
/// samples that were never part of an earlier pass.
inline UpdateReport train_on_buffer(TeacherModel& model, ReplayBuffer& buffer, const TeacherConfig& cfg,
                                    OptimizerState& opt, Rng& rng) {
  UpdateReport report;
  report.buffer_size = buffer.size();
  if (buffer.empty()) {
    report.skipped = true;
    report.warning = "replay buffer empty at update trigger; update skipped";
    return report;
  }
  auto& samples = buffer.samples();
  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[static_cast<std::size_t>(rng.below(i))]);
  }
  double abs_err = 0.0;
  for (std::size_t epoch = 0; epoch < cfg.epochs_per_update; ++epoch) {
    double sq = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<TrainingPair> batch;
      batch.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) {
        const auto& s = samples[order[i]];
        batch.push_back({s.features, s.target});
        const double err = model.predict(s.features) - s.target;
        sq += err * err;
        if (epoch == 0 && !s.trained) {
          abs_err += std::abs(err);
          ++report.unseen_count;
        }
      }
      const auto lg = mse_loss_and_gradient(model, batch);
      optimizer_step(model.parameters(), lg.gradient, cfg, opt);
    }
    report.epoch_mse.push_back(sq / static_cast<double>(order.size()));
  }
  if (report.unseen_count > 0) report.unseen_mae = abs_err / static_cast<double>(report.unseen_count);
  for (auto& s : samples) s.trained = true;
  return report;
}

/// Teacher state owned by one actor: model, buffer, and the update counter.
class Teacher {
 public:
  Teacher(TeacherModel model, TeacherConfig cfg, std::uint64_t seed)
      : model_(std::move(model)), cfg_(cfg), buffer_(cfg.replay_capacity), seed_(seed) {
    cfg_.validate();
    constructed_.fetch_add(1, std::memory_order_relaxed);
  }

  /// Process-wide count of Teacher constructions.
  static std::uint64_t constructed() noexcept { return constructed_.load(std::memory_order_relaxed); }

  const TeacherModel& model() const noexcept { return model_; }
  TeacherModel& model() noexcept { return model_; }
  const TeacherConfig& config() const noexcept { return cfg_; }
  const ReplayBuffer& buffer() const noexcept { return buffer_; }
  ReplayBuffer& buffer() noexcept { return buffer_; }
  std::uint64_t updates() const noexcept { return updates_; }
  std::size_t records_since_update() const noexcept { return since_update_; }

  double record(const Question& q, const RolloutGroup& group) {
    const double y = record_feedback(buffer_, q, group);
    ++since_update_;
    return y;
  }

  bool update_due() const noexcept { return since_update_ >= cfg_.update_every; }

  /// Runs a refinement pass if M_update records arrived since the last one.
  std::optional<UpdateReport> maybe_update() {
    if (!update_due()) return std::nullopt;
    since_update_ = 0;
    Rng rng{stream::kShuffle, seed_, updates_};
    auto report = train_on_buffer(model_, buffer_, cfg_, opt_, rng);
    if (!report.skipped) ++updates_;
    report.update_index = updates_;
    return report;
  }

 private:
  TeacherModel model_;
  TeacherConfig cfg_;
  ReplayBuffer buffer_;
  OptimizerState opt_;
  std::uint64_t seed_;
  std::uint64_t updates_ = 0;
  std::size_t since_update_ = 0;
  inline static std::atomic<std::uint64_t> constructed_{0};
};

/// Free-function form: trigger on `records_since_update >= update_every`.
inline std::optional<UpdateReport> maybe_update(TeacherModel& model, ReplayBuffer& buffer, const TeacherConfig& cfg,
                                                std::size_t& records_since_update, OptimizerState& opt, Rng& rng) {
  if (records_since_update < cfg.update_every) return std::nullopt;
  records_since_update = 0;
  return train_on_buffer(model, buffer, cfg, opt, rng);
}

}  // namespace goldilocks
