// SPDX-License-Identifier: Apache-2.0
#pragma once

// Group-relative advantages and the policy-gradient losses built on them.
//
// Rewards are r_total = r_format + r_ver with r_ver in {0,1}. Advantages are
// standardized with the population standard deviation of the group, which is
// exactly the Bernoulli std sqrt(p(1-p)) once r_format is constant. A group
// with zero spread gets all-zero advantages (no gradient), never an epsilon.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "goldilocks/error.hpp"
#include "goldilocks/policy.hpp"
#include "goldilocks/rng.hpp"

namespace goldilocks {

using QuestionId = std::uint64_t;

struct RewardConfig {
  double format_constant = 0.0;
  std::int64_t format_warmup_steps = 0;
  double format_noise_amplitude = 0.0;
  std::uint64_t noise_seed = 0;
};

struct RolloutGroup {
  QuestionId question_id = 0;
  std::vector<int> rewards_ver;
  std::vector<double> rewards_format;

  std::size_t group_size() const noexcept { return rewards_ver.size(); }
  int correct_count() const noexcept {
    return static_cast<int>(std::count(rewards_ver.begin(), rewards_ver.end(), 1));
  }
};

struct AdvantageSet {
  std::vector<double> advantages;
  double empirical_p = 0.0;
  double group_std = 0.0;
  double mean_reward = 0.0;  // mean of r_total

  bool zero_variance() const noexcept { return group_std == 0.0; }
};

enum class LossVariant { Grpo, Dapo, GrpoEntropy };
enum class ZeroStdPolicy { ZeroAdvantage };

struct LossConfig {
  LossVariant variant = LossVariant::Grpo;
  double entropy_beta = 0.0003;
  double clip_low = 0.2;
  double clip_high = 0.2;
  ZeroStdPolicy zero_std_policy = ZeroStdPolicy::ZeroAdvantage;
  /// Extra rollout groups drawn for the same question while a DAPO group is
  /// all-correct or all-incorrect.
  int dapo_max_resamples = 8;

  void validate() const {
    if (!(clip_low > 0.0 && clip_low < 1.0) || !(clip_high > 0.0 && clip_high < 1.0)) {
      throw Error(ErrorCode::Config, "loss.clip_low and loss.clip_high must lie in (0, 1)");
    }
    if (entropy_beta < 0.0) throw Error(ErrorCode::Config, "loss.entropy_beta must be >= 0");
    if (dapo_max_resamples < 0) throw Error(ErrorCode::Config, "loss.dapo_max_resamples must be >= 0");
  }
};

/// Rollouts of one question together with what is needed to recompute their
/// log-probabilities. For the IRT student `outputs` holds empty sequences.
struct SampledGroup {
  QuestionId question_id = 0;
  std::vector<double> features;
  std::vector<TokenSequence> outputs;
  std::vector<std::vector<double>> log_probs;
  double temperature = 1.0;

  std::size_t token_count() const noexcept {
    std::size_t n = 0;
    for (const auto& o : outputs) n += o.size();
    return n;
  }
};

struct LossAndGradient {
  double loss = 0.0;
  std::vector<double> gradient;
};

// ---------------------------------------------------------------------------
// Rewards and advantages
// ---------------------------------------------------------------------------

/// r_format at `step`: the constant after warmup, a bounded seeded
/// perturbation of it before. `rollout_key` separates rollouts of one step.
inline double format_reward(std::int64_t step, const RewardConfig& cfg, std::uint64_t rollout_key = 0) {
  if (step < 0) throw Error(ErrorCode::InvalidInput, "step must be >= 0");
  if (step >= cfg.format_warmup_steps || cfg.format_noise_amplitude == 0.0) return cfg.format_constant;
  Rng rng{stream::kFormat, cfg.noise_seed, static_cast<std::uint64_t>(step), rollout_key};
  return cfg.format_constant + cfg.format_noise_amplitude * (2.0 * rng.uniform() - 1.0);
}

inline double total_reward(int r_ver, std::int64_t step, const RewardConfig& cfg,
                           std::uint64_t rollout_key = 0) {
  return format_reward(step, cfg, rollout_key) + static_cast<double>(r_ver);
}

inline double utility_score(double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw Error(ErrorCode::InvalidInput, "probability outside [0, 1]");
  return std::sqrt(p * (1.0 - p));
}

/// Analytic (correct, incorrect) advantages for success probability p.
inline std::pair<double, double> closed_form_advantages(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    throw Error(ErrorCode::DegenerateProbability, "closed-form advantages need 0 < p < 1");
  }
  const double s = std::sqrt(p * (1.0 - p));
  return {(1.0 - p) / s, -p / s};
}

inline AdvantageSet group_advantages(const RolloutGroup& group) {
  const std::size_t g = group.group_size();
  if (g < 2) throw Error(ErrorCode::InvalidGroup, "group needs at least 2 rollouts");
  if (group.rewards_format.size() != g) {
    throw Error(ErrorCode::InvalidGroup, "rewards_format length differs from rewards_ver");
  }
  std::vector<double> total(g);
  int correct = 0;
  for (std::size_t i = 0; i < g; ++i) {
    const int r = group.rewards_ver[i];
    if (r != 0 && r != 1) throw Error(ErrorCode::InvalidGroup, "r_ver must be 0 or 1");
    correct += r;
    total[i] = group.rewards_format[i] + static_cast<double>(r);
  }
  AdvantageSet out;
  out.advantages.assign(g, 0.0);
  out.empirical_p = static_cast<double>(correct) / static_cast<double>(g);
  const double n = static_cast<double>(g);
  const double mean = std::accumulate(total.begin(), total.end(), 0.0) / n;
  out.mean_reward = mean;

  // Identical rewards are detected directly: the float mean of equal values
  // need not reproduce them, which would leave a spurious tiny std.
  const bool all_equal = std::all_of(total.begin(), total.end(), [&](double v) { return v == total[0]; });
  if (all_equal) {
    out.mean_reward = total[0];
    return out;
  }
  double ss = 0.0;
  for (double v : total) ss += (v - mean) * (v - mean);
  out.group_std = std::sqrt(ss / n);
  for (std::size_t i = 0; i < g; ++i) out.advantages[i] = (total[i] - mean) / out.group_std;
  return out;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

namespace detail {
inline void check_group_shapes(const SampledGroup& group, const AdvantageSet& adv) {
  if (group.outputs.size() != adv.advantages.size()) {
    throw Error(ErrorCode::MalformedRollout, "advantage count differs from rollout count");
  }
}
}  // namespace detail

/// L = -(1/G) sum_i sum_t log pi(o_it) * A_i with its exact gradient. One
/// update iteration per batch means the importance ratio is identically 1.
inline LossAndGradient grpo_loss_and_gradient(const SoftmaxPolicy& policy, const SampledGroup& group,
                                              const AdvantageSet& adv) {
  detail::check_group_shapes(group, adv);
  LossAndGradient out;
  out.gradient.assign(policy.parameter_count(), 0.0);
  const double g = static_cast<double>(group.outputs.size());
  if (group.outputs.empty()) return out;
  for (std::size_t i = 0; i < group.outputs.size(); ++i) {
    const double a = adv.advantages[i];
    const double lp = policy.sequence_log_prob(group.features, group.outputs[i], group.temperature);
    if (a == 0.0) continue;
    out.loss -= lp * a / g;
    policy.accumulate_log_prob_gradient(group.features, group.outputs[i], group.temperature, -a / g,
                                        out.gradient);
  }
  return out;
}

namespace detail {
/// min(r a, clip(r) a) - a, written in terms of r - 1 so that ratios near one
/// and the clip bounds themselves lose no precision.
inline double clipped_excess(double r, double a, const LossConfig& cfg) {
  const double d = r - 1.0;
  return std::min(d * a, std::clamp(d, -cfg.clip_low, cfg.clip_high) * a);
}

/// True when the min picks the unclipped (parameter-dependent) branch.
inline bool unclipped_branch(double r, double a, const LossConfig& cfg) {
  const double d = r - 1.0;
  const double c = std::clamp(d, -cfg.clip_low, cfg.clip_high);
  if (c * a < d * a) return false;
  return !(c * a == d * a && c != d);
}
}  // namespace detail

/// Clipped surrogate averaged over every token of the group. Returns the
/// objective to maximize.
inline double dapo_objective_from_ratios(std::span<const std::vector<double>> ratios,
                                         std::span<const double> advantages, const LossConfig& cfg) {
  if (ratios.size() != advantages.size()) {
    throw Error(ErrorCode::MalformedRollout, "ratio rows differ from advantage count");
  }
  double base = 0.0, excess = 0.0;
  std::size_t tokens = 0;
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    const double a = advantages[i];
    for (double r : ratios[i]) {
      base += a;
      excess += detail::clipped_excess(r, a, cfg);
      ++tokens;
    }
  }
  if (tokens == 0) return 0.0;
  return (base + excess) / static_cast<double>(tokens);
}

namespace detail {
inline void check_mixed_batch(const AdvantageSet& adv) {
  if (adv.empirical_p <= 0.0 || adv.empirical_p >= 1.0) {
    throw Error(ErrorCode::MixedBatchViolation, "DAPO needs at least one correct and one incorrect rollout");
  }
}

inline std::vector<std::vector<double>> token_ratios(const SoftmaxPolicy& policy_new,
                                                     const SoftmaxPolicy& policy_old,
                                                     const SampledGroup& group) {
  std::vector<std::vector<double>> ratios;
  ratios.reserve(group.outputs.size());
  for (const auto& seq : group.outputs) {
    const auto lp_new = policy_new.token_log_probs(group.features, seq, group.temperature);
    const auto lp_old = policy_old.token_log_probs(group.features, seq, group.temperature);
    std::vector<double> row(seq.size());
    for (std::size_t t = 0; t < seq.size(); ++t) row[t] = std::exp(lp_new[t] - lp_old[t]);
    ratios.push_back(std::move(row));
  }
  return ratios;
}
}  // namespace detail

inline double dapo_loss(const SoftmaxPolicy& policy_new, const SoftmaxPolicy& policy_old,
                        const SampledGroup& group, const AdvantageSet& adv, const LossConfig& cfg) {
  detail::check_group_shapes(group, adv);
  detail::check_mixed_batch(adv);
  const auto ratios = detail::token_ratios(policy_new, policy_old, group);
  return dapo_objective_from_ratios(ratios, adv.advantages, cfg);
}

/// Descent form of the DAPO objective (negated) and its gradient w.r.t. the
/// new policy. Tokens whose ratio sits on the clipped side contribute nothing.
inline LossAndGradient dapo_loss_and_gradient(const SoftmaxPolicy& policy_new, const SoftmaxPolicy& policy_old,
                                              const SampledGroup& group, const AdvantageSet& adv,
                                              const LossConfig& cfg) {
  detail::check_group_shapes(group, adv);
  detail::check_mixed_batch(adv);
  LossAndGradient out;
  out.gradient.assign(policy_new.parameter_count(), 0.0);
  const std::size_t tokens = group.token_count();
  if (tokens == 0) return out;
  const auto ratios = detail::token_ratios(policy_new, policy_old, group);
  out.loss = -dapo_objective_from_ratios(ratios, adv.advantages, cfg);
  const double inv_tokens = 1.0 / static_cast<double>(tokens);

  // d/dtheta log pi(o_t | o_<t) for one position, via a one-token suffix trick:
  // accumulate_log_prob_gradient on the prefix o_<=t minus on o_<t.
  for (std::size_t i = 0; i < group.outputs.size(); ++i) {
    const double a = adv.advantages[i];
    const auto& seq = group.outputs[i];
    for (std::size_t t = 0; t < seq.size(); ++t) {
      const double r = ratios[i][t];
      if (!detail::unclipped_branch(r, a, cfg)) continue;  // constant branch
      // d(r*a) = a * r * dlog pi_new(o_t)
      const double scale = -inv_tokens * a * r;
      TokenSequence prefix(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(t) + 1);
      policy_new.accumulate_log_prob_gradient(group.features, prefix, group.temperature, scale, out.gradient);
      if (t > 0) {
        prefix.pop_back();
        policy_new.accumulate_log_prob_gradient(group.features, prefix, group.temperature, -scale, out.gradient);
      }
    }
  }
  return out;
}

/// Exact entropy of the full output distribution (by enumeration over V^T)
/// and its gradient.
inline std::pair<double, std::vector<double>> entropy_bonus(const SoftmaxPolicy& policy,
                                                            std::span<const double> features,
                                                            double temperature) {
  double h = 0.0;
  std::vector<double> grad(policy.parameter_count(), 0.0);
  policy.for_each_sequence([&](const TokenSequence& seq) {
    const double lp = policy.sequence_log_prob(features, seq, temperature);
    const double p = std::exp(lp);
    if (p == 0.0) return;
    h -= p * lp;
    // dH = -sum_o p(o) log p(o) dlog p(o)   (the sum_o p dlog p term is zero)
    policy.accumulate_log_prob_gradient(features, seq, temperature, -p * lp, grad);
  });
  return {h, std::move(grad)};
}

// ---------------------------------------------------------------------------
// Exact expectations for the gradient-norm law
// ---------------------------------------------------------------------------

/// Exact probability mass of `answer` under the policy at `temperature`.
inline double exact_success_probability(const SoftmaxPolicy& policy, std::span<const double> features,
                                        const TokenSequence& answer, double temperature) {
  return std::exp(policy.sequence_log_prob(features, answer, temperature));
}

/// E_o[ -sum_t log pi(o_t) A(o) ] gradient with the analytic advantages,
/// computed by enumerating every output sequence.
inline std::vector<double> expected_pg_gradient(const SoftmaxPolicy& policy, std::span<const double> features,
                                                const TokenSequence& answer, double temperature) {
  std::vector<double> grad(policy.parameter_count(), 0.0);
  const double p = exact_success_probability(policy, features, answer, temperature);
  if (!(p > 0.0 && p < 1.0)) return grad;
  const auto [a_correct, a_incorrect] = closed_form_advantages(p);
  policy.for_each_sequence([&](const TokenSequence& seq) {
    const double prob = std::exp(policy.sequence_log_prob(features, seq, temperature));
    const double a = (seq == answer) ? a_correct : a_incorrect;
    policy.accumulate_log_prob_gradient(features, seq, temperature, -prob * a, grad);
  });
  return grad;
}

/// E[dlog pi | correct] - E[dlog pi | incorrect]; the expected policy
/// gradient equals -sqrt(p(1-p)) times this vector.
inline std::vector<double> conditional_gradient_gap(const SoftmaxPolicy& policy, std::span<const double> features,
                                                    const TokenSequence& answer, double temperature) {
  std::vector<double> gap(policy.parameter_count(), 0.0);
  const double p = exact_success_probability(policy, features, answer, temperature);
  if (!(p > 0.0 && p < 1.0)) return gap;
  policy.for_each_sequence([&](const TokenSequence& seq) {
    const double prob = std::exp(policy.sequence_log_prob(features, seq, temperature));
    const double w = (seq == answer) ? prob / p : -prob / (1.0 - p);
    policy.accumulate_log_prob_gradient(features, seq, temperature, w, gap);
  });
  return gap;
}

inline double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace goldilocks
