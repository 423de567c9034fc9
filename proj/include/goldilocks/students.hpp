// SPDX-License-Identifier: Apache-2.0
#pragma once

// Student backends. Both satisfy the StudentBackend concept consumed by the
// experiment loop and the protocol client.
//
// IrtStudent: p_q = sigmoid(a (s - d_q)). Its update is a surrogate for a
// policy-gradient step: the skill moves by learn_rate * sqrt(p_hat (1 - p_hat)),
// i.e. in proportion to the norm of the expected GRPO gradient.
//
// PolicyStudent: a SoftmaxPolicy trained with the real loss gradients.

#include <bit>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <span>
#include <vector>

#include "goldilocks/dataset.hpp"
#include "goldilocks/error.hpp"
#include "goldilocks/grpo_core.hpp"
#include "goldilocks/policy.hpp"
#include "goldilocks/rng.hpp"

namespace goldilocks {

struct RolloutResult {
  RolloutGroup group;
  SampledGroup sampled;
};

/// Stream seed for one rollout group. `slot` separates two draws of the same
/// question within one step.
inline std::uint64_t rollout_seed(std::uint64_t seed, std::int64_t step, QuestionId id, std::uint64_t slot) {
  return derive_seed({stream::kRollout, seed, static_cast<std::uint64_t>(step), id, slot});
}

namespace detail {
inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

class Fnv1a {
 public:
  void add(double v) { add(std::bit_cast<std::uint64_t>(v)); }
  void add(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h_ ^= (v >> (8 * i)) & 0xffU;
      h_ *= 0x100000001b3ULL;
    }
  }
  std::uint64_t value() const noexcept { return h_; }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

inline void fill_format_rewards(RolloutGroup& group, std::int64_t step, const RewardConfig& cfg,
                                std::uint64_t group_key) {
  group.rewards_format.resize(group.rewards_ver.size());
  for (std::size_t i = 0; i < group.rewards_ver.size(); ++i) {
    group.rewards_format[i] = format_reward(step, cfg, derive_seed({group_key, i}));
  }
}
}  // namespace detail

// ---------------------------------------------------------------------------

struct IrtStudentState {
  double skill = 0.0;
  double discrimination = 1.0;
  double learn_rate = 0.01;
};

class IrtStudent {
 public:
  explicit IrtStudent(IrtStudentState state = {}) : state_(state) {
    if (!(state.discrimination > 0.0) || !(state.learn_rate > 0.0)) {
      throw Error(ErrorCode::Config, "irt student needs discrimination > 0 and learn_rate > 0");
    }
  }

  const IrtStudentState& state() const noexcept { return state_; }
  double skill() const noexcept { return state_.skill; }

  double success_probability(const Question& q) const {
    return detail::sigmoid(state_.discrimination * (state_.skill - q.difficulty));
  }

  RolloutResult rollout(const Question& q, std::size_t group_size, std::int64_t step,
                        const RewardConfig& reward_cfg, std::uint64_t seed, std::uint64_t slot = 0) const {
    if (group_size < 2) throw Error(ErrorCode::InvalidGroup, "group size must be >= 2");
    const std::uint64_t key = rollout_seed(seed, step, q.id, slot);
    Rng rng(key);
    const double p = success_probability(q);
    RolloutResult out;
    out.group.question_id = q.id;
    out.group.rewards_ver.resize(group_size);
    for (auto& r : out.group.rewards_ver) r = rng.bernoulli(p) ? 1 : 0;
    detail::fill_format_rewards(out.group, step, reward_cfg, key);
    out.sampled.question_id = q.id;
    out.sampled.features = q.features;
    out.sampled.outputs.assign(group_size, {});
    out.sampled.log_probs.assign(group_size, {});
    return out;
  }

  /// Adds one question's contribution to the pending batch update; returns
  /// the per-question gradient-norm surrogate sqrt(p_hat (1 - p_hat)).
  double accumulate(const Question&, const AdvantageSet& adv, const SampledGroup&, const LossConfig& = {}) {
    const double increment = utility_score(adv.empirical_p);
    pending_ += increment;
    ++pending_count_;
    return increment;
  }

  /// Applies the mean of the accumulated increments.
  void apply_update() {
    if (pending_count_ > 0) state_.skill += state_.learn_rate * pending_ / static_cast<double>(pending_count_);
    pending_ = 0.0;
    pending_count_ = 0;
  }

  /// Drops the pending batch without touching the skill.
  void discard_update() {
    pending_ = 0.0;
    pending_count_ = 0;
  }

  /// Single-question update (a batch of one).
  void update(const Question& q, const AdvantageSet& adv, const SampledGroup& group) {
    accumulate(q, adv, group);
    apply_update();
  }

  /// Exact expected accuracy, sum_q p_q / n.
  double evaluate(std::span<const Question> validation) const {
    if (validation.empty()) throw Error(ErrorCode::InvalidInput, "validation set is empty");
    double s = 0.0;
    for (const auto& q : validation) s += success_probability(q);
    return s / static_cast<double>(validation.size());
  }

  std::uint64_t state_hash() const {
    detail::Fnv1a h;
    h.add(state_.skill);
    h.add(state_.discrimination);
    h.add(state_.learn_rate);
    h.add(pending_);
    h.add(static_cast<std::uint64_t>(pending_count_));
    return h.value();
  }

 private:
  IrtStudentState state_;
  double pending_ = 0.0;
  std::int64_t pending_count_ = 0;
};

// ---------------------------------------------------------------------------

struct PolicyStudentConfig {
  std::size_t vocab_size = 10;
  std::size_t sequence_length = 1;
  double temperature_train = 0.7;
  double temperature_eval = 0.0;  // 0 = greedy
  double learn_rate = 0.5;
  double init_scale = 0.01;
};

class PolicyStudent {
 public:
  PolicyStudent(std::size_t feature_dim, PolicyStudentConfig cfg, std::uint64_t seed)
      : cfg_(cfg), policy_(feature_dim, cfg.vocab_size, cfg.sequence_length) {
    if (!(cfg.temperature_train > 0.0) || cfg.temperature_eval < 0.0 || !(cfg.learn_rate > 0.0)) {
      throw Error(ErrorCode::Config, "policy student needs temperature_train > 0, temperature_eval >= 0, learn_rate > 0");
    }
    Rng rng{stream::kInit, seed};
    policy_.randomize(rng, cfg.init_scale);
    pending_.assign(policy_.parameter_count(), 0.0);
  }

  PolicyStudent(SoftmaxPolicy policy, PolicyStudentConfig cfg) : cfg_(cfg), policy_(std::move(policy)) {
    pending_.assign(policy_.parameter_count(), 0.0);
  }

  const SoftmaxPolicy& policy() const noexcept { return policy_; }
  SoftmaxPolicy& policy() noexcept { return policy_; }
  const PolicyStudentConfig& config() const noexcept { return cfg_; }

  double success_probability(const Question& q) const {
    return exact_success_probability(policy_, q.features, q.payload.answer, cfg_.temperature_train);
  }

  RolloutResult rollout(const Question& q, std::size_t group_size, std::int64_t step,
                        const RewardConfig& reward_cfg, std::uint64_t seed, std::uint64_t slot = 0) const {
    if (group_size < 2) throw Error(ErrorCode::InvalidGroup, "group size must be >= 2");
    const std::uint64_t key = rollout_seed(seed, step, q.id, slot);
    RolloutResult out;
    out.group.question_id = q.id;
    out.group.rewards_ver.resize(group_size);
    out.sampled.question_id = q.id;
    out.sampled.features = q.features;
    out.sampled.temperature = cfg_.temperature_train;
    for (std::size_t i = 0; i < group_size; ++i) {
      // one stream per rollout so rollouts could be drawn in parallel
      Rng rng(derive_seed({key, i}));
      auto seq = policy_.sample(q.features, cfg_.temperature_train, rng);
      out.group.rewards_ver[i] = (seq == q.payload.answer) ? 1 : 0;
      out.sampled.log_probs.push_back(policy_.token_log_probs(q.features, seq, cfg_.temperature_train));
      out.sampled.outputs.push_back(std::move(seq));
    }
    detail::fill_format_rewards(out.group, step, reward_cfg, key);
    return out;
  }

  /// Gradient of the active loss for one question (descent direction is
  /// minus this). The entropy variant subtracts beta * dH, a bonus.
  std::vector<double> loss_gradient(const Question& q, const AdvantageSet& adv, const SampledGroup& group,
                                    const LossConfig& loss_cfg) const {
    switch (loss_cfg.variant) {
      case LossVariant::Grpo:
        return grpo_loss_and_gradient(policy_, group, adv).gradient;
      case LossVariant::GrpoEntropy: {
        auto g = grpo_loss_and_gradient(policy_, group, adv).gradient;
        const auto [h, dh] = entropy_bonus(policy_, q.features, group.temperature);
        (void)h;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= loss_cfg.entropy_beta * dh[i];
        return g;
      }
      case LossVariant::Dapo:
        if (adv.empirical_p <= 0.0 || adv.empirical_p >= 1.0) return std::vector<double>(policy_.parameter_count(), 0.0);
        return dapo_loss_and_gradient(policy_, policy_, group, adv, loss_cfg).gradient;
    }
    return {};
  }

  double accumulate(const Question& q, const AdvantageSet& adv, const SampledGroup& group,
                    const LossConfig& loss_cfg = {}) {
    const auto g = loss_gradient(q, adv, group, loss_cfg);
    for (std::size_t i = 0; i < g.size(); ++i) pending_[i] += g[i];
    ++pending_count_;
    return l2_norm(g);
  }

  void apply_update() {
    if (pending_count_ > 0) {
      auto w = policy_.weights();
      const double scale = cfg_.learn_rate / static_cast<double>(pending_count_);
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= scale * pending_[i];
    }
    std::fill(pending_.begin(), pending_.end(), 0.0);
    pending_count_ = 0;
  }

  void discard_update() {
    std::fill(pending_.begin(), pending_.end(), 0.0);
    pending_count_ = 0;
  }

  void update(const Question& q, const AdvantageSet& adv, const SampledGroup& group,
              const LossConfig& loss_cfg = {}) {
    accumulate(q, adv, group, loss_cfg);
    apply_update();
  }

  /// Greedy accuracy (temperature_eval == 0) or exact expected accuracy.
  double evaluate(std::span<const Question> validation) const {
    if (validation.empty()) throw Error(ErrorCode::InvalidInput, "validation set is empty");
    double correct = 0.0;
    for (const auto& q : validation) {
      if (cfg_.temperature_eval == 0.0) {
        correct += (policy_.greedy(q.features) == q.payload.answer) ? 1.0 : 0.0;
      } else {
        correct += exact_success_probability(policy_, q.features, q.payload.answer, cfg_.temperature_eval);
      }
    }
    return correct / static_cast<double>(validation.size());
  }

  std::uint64_t state_hash() const {
    detail::Fnv1a h;
    for (double w : policy_.weights()) h.add(w);
    for (double w : pending_) h.add(w);
    h.add(static_cast<std::uint64_t>(pending_count_));
    return h.value();
  }

 private:
  PolicyStudentConfig cfg_;
  SoftmaxPolicy policy_;
  std::vector<double> pending_;
  std::int64_t pending_count_ = 0;
};

template <class S>
concept StudentBackend = requires(S s, const S cs, const Question& q, const AdvantageSet& adv,
                                  const SampledGroup& sg, const LossConfig& lc, const RewardConfig& rc,
                                  std::span<const Question> qs) {
  { cs.success_probability(q) } -> std::convertible_to<double>;
  { cs.rollout(q, std::size_t{}, std::int64_t{}, rc, std::uint64_t{}, std::uint64_t{}) } -> std::same_as<RolloutResult>;
  { s.accumulate(q, adv, sg, lc) } -> std::convertible_to<double>;
  s.apply_update();
  s.discard_update();
  { cs.evaluate(qs) } -> std::convertible_to<double>;
  { cs.state_hash() } -> std::convertible_to<std::uint64_t>;
};

static_assert(StudentBackend<IrtStudent>);
static_assert(StudentBackend<PolicyStudent>);

}  // namespace goldilocks
