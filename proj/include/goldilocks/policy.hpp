// SPDX-License-Identifier: Apache-2.0
#pragma once

// Autoregressive softmax policy over a small vocabulary. Each position sees
// the question features, a one-hot of the previous token and a bias input;
// logits are linear in that context and scaled by 1/temperature.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "goldilocks/error.hpp"
#include "goldilocks/rng.hpp"

namespace goldilocks {

using TokenSequence = std::vector<int>;

class SoftmaxPolicy {
 public:
  SoftmaxPolicy() = default;
  SoftmaxPolicy(std::size_t feature_dim, std::size_t vocab, std::size_t sequence_length)
      : feature_dim_(feature_dim),
        vocab_(vocab),
        sequence_length_(sequence_length),
        weights_((feature_dim + vocab + 1) * vocab, 0.0) {
    if (vocab == 0 || sequence_length == 0) {
      throw Error(ErrorCode::InvalidSize, "policy needs vocab > 0 and sequence_length > 0");
    }
  }

  std::size_t feature_dim() const noexcept { return feature_dim_; }
  std::size_t vocab() const noexcept { return vocab_; }
  std::size_t sequence_length() const noexcept { return sequence_length_; }
  std::size_t context_dim() const noexcept { return feature_dim_ + vocab_ + 1; }
  std::size_t parameter_count() const noexcept { return weights_.size(); }

  std::span<double> weights() noexcept { return weights_; }
  std::span<const double> weights() const noexcept { return weights_; }

  double& weight(std::size_t context_index, std::size_t token) {
    return weights_[context_index * vocab_ + token];
  }
  /// Row index of the bias input inside the context vector.
  std::size_t bias_index() const noexcept { return feature_dim_ + vocab_; }

  void randomize(Rng& rng, double scale) {
    for (auto& w : weights_) w = scale * rng.normal();
  }

  /// prev_token < 0 marks the first position.
  std::vector<double> context(std::span<const double> features, int prev_token) const {
    check_features(features);
    std::vector<double> ctx(context_dim(), 0.0);
    std::copy(features.begin(), features.end(), ctx.begin());
    if (prev_token >= 0) ctx[feature_dim_ + static_cast<std::size_t>(prev_token)] = 1.0;
    ctx[bias_index()] = 1.0;
    return ctx;
  }

  std::vector<double> logits(std::span<const double> ctx) const {
    std::vector<double> z(vocab_, 0.0);
    for (std::size_t d = 0; d < ctx.size(); ++d) {
      const double x = ctx[d];
      if (x == 0.0) continue;
      const double* row = &weights_[d * vocab_];
      for (std::size_t v = 0; v < vocab_; ++v) z[v] += x * row[v];
    }
    return z;
  }

  /// softmax(logits / temperature), temperature > 0.
  std::vector<double> probs(std::span<const double> ctx, double temperature) const {
    auto z = logits(ctx);
    const double zmax = *std::max_element(z.begin(), z.end());
    double total = 0.0;
    for (auto& v : z) {
      v = std::exp((v - zmax) / temperature);
      total += v;
    }
    for (auto& v : z) v /= total;
    return z;
  }

  std::vector<double> log_probs(std::span<const double> ctx, double temperature) const {
    auto z = logits(ctx);
    const double zmax = *std::max_element(z.begin(), z.end());
    double total = 0.0;
    for (double v : z) total += std::exp((v - zmax) / temperature);
    const double log_norm = std::log(total);
    for (auto& v : z) v = (v - zmax) / temperature - log_norm;
    return z;
  }

  /// Per-token log probabilities of `seq`; throws on out-of-vocabulary tokens.
  std::vector<double> token_log_probs(std::span<const double> features, const TokenSequence& seq,
                                      double temperature) const {
    check_sequence(seq);
    std::vector<double> out;
    out.reserve(seq.size());
    int prev = -1;
    for (int tok : seq) {
      const auto lp = log_probs(context(features, prev), temperature);
      out.push_back(lp[static_cast<std::size_t>(tok)]);
      prev = tok;
    }
    return out;
  }

  double sequence_log_prob(std::span<const double> features, const TokenSequence& seq,
                           double temperature) const {
    double s = 0.0;
    for (double lp : token_log_probs(features, seq, temperature)) s += lp;
    return s;
  }

  /// grad += scale * d/dW log pi(seq | features).
  void accumulate_log_prob_gradient(std::span<const double> features, const TokenSequence& seq,
                                    double temperature, double scale,
                                    std::span<double> grad) const {
    check_sequence(seq);
    check_grad(grad);
    int prev = -1;
    for (int tok : seq) {
      const auto ctx = context(features, prev);
      const auto p = probs(ctx, temperature);
      for (std::size_t d = 0; d < ctx.size(); ++d) {
        const double x = ctx[d];
        if (x == 0.0) continue;
        double* row = &grad[d * vocab_];
        for (std::size_t v = 0; v < vocab_; ++v) {
          const double indicator = (static_cast<int>(v) == tok) ? 1.0 : 0.0;
          row[v] += scale * x * (indicator - p[v]) / temperature;
        }
      }
      prev = tok;
    }
  }

  /// Draws one sequence at `temperature`.
  TokenSequence sample(std::span<const double> features, double temperature, Rng& rng) const {
    TokenSequence seq;
    seq.reserve(sequence_length_);
    int prev = -1;
    for (std::size_t t = 0; t < sequence_length_; ++t) {
      const auto p = probs(context(features, prev), temperature);
      const double u = rng.uniform();
      double acc = 0.0;
      int tok = static_cast<int>(vocab_) - 1;
      for (std::size_t v = 0; v < vocab_; ++v) {
        acc += p[v];
        if (u < acc) {
          tok = static_cast<int>(v);
          break;
        }
      }
      seq.push_back(tok);
      prev = tok;
    }
    return seq;
  }

  /// Greedy decoding; ties go to the smallest token id.
  TokenSequence greedy(std::span<const double> features) const {
    TokenSequence seq;
    int prev = -1;
    for (std::size_t t = 0; t < sequence_length_; ++t) {
      const auto z = logits(context(features, prev));
      const int tok = static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
      seq.push_back(tok);
      prev = tok;
    }
    return seq;
  }

  /// Calls fn(seq) for every sequence in V^T, in lexicographic order.
  void for_each_sequence(const std::function<void(const TokenSequence&)>& fn) const {
    TokenSequence seq(sequence_length_, 0);
    while (true) {
      fn(seq);
      std::size_t pos = sequence_length_;
      while (pos > 0) {
        --pos;
        if (++seq[pos] < static_cast<int>(vocab_)) break;
        seq[pos] = 0;
        if (pos == 0) return;
      }
    }
  }

 private:
  void check_features(std::span<const double> features) const {
    if (features.size() != feature_dim_) {
      throw Error(ErrorCode::ShapeMismatch, "policy expects " + std::to_string(feature_dim_) +
                                                " features, got " + std::to_string(features.size()));
    }
  }
  void check_sequence(const TokenSequence& seq) const {
    for (int tok : seq) {
      if (tok < 0 || tok >= static_cast<int>(vocab_)) {
        throw Error(ErrorCode::MalformedRollout,
                    "token " + std::to_string(tok) + " outside vocabulary of " + std::to_string(vocab_));
      }
    }
  }
  void check_grad(std::span<double> grad) const {
    if (grad.size() != weights_.size()) {
      throw Error(ErrorCode::ShapeMismatch, "gradient buffer size does not match policy parameters");
    }
  }

  std::size_t feature_dim_ = 0;
  std::size_t vocab_ = 0;
  std::size_t sequence_length_ = 0;
  std::vector<double> weights_;
};

}  // namespace goldilocks
