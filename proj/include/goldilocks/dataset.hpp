// SPDX-License-Identifier: Apache-2.0
#pragma once

// Synthetic question sets standing in for a math corpus.
//
//  irt:        hidden difficulty d ~ N(mean, std). Feature 0 is a noisy,
//              standardized observation of d; the remaining features are
//              N(0,1) distractors. The teacher only ever sees features.
//  arithmetic: (a, b) with answer (a + b) mod V; features are a fixed random
//              projection of onehot(a) ++ onehot(b).
//
// Every question is generated from its own stream derive_seed(seed, id), so a
// question's content depends only on (seed, id).

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "goldilocks/error.hpp"
#include "goldilocks/grpo_core.hpp"
#include "goldilocks/rng.hpp"

namespace goldilocks {

enum class DatasetKind { Irt, Arithmetic };

inline std::string to_string(DatasetKind k) { return k == DatasetKind::Irt ? "irt" : "arithmetic"; }

struct TaskPayload {
  std::vector<std::int64_t> operands;  // (a, b) for arithmetic
  TokenSequence answer;                // answer key; empty for irt

  friend bool operator==(const TaskPayload&, const TaskPayload&) = default;
};

struct Question {
  QuestionId id = 0;
  std::vector<double> features;
  double difficulty = 0.0;
  TaskPayload payload;

  friend bool operator==(const Question&, const Question&) = default;
};

struct DatasetSpec {
  DatasetKind kind = DatasetKind::Irt;
  std::int64_t size = 10000;
  std::uint64_t seed = 1;
  // irt
  double difficulty_mean = 0.0;
  double difficulty_std = 2.0;
  double feature_noise = 0.0;  // std of the additive noise on d, before standardizing
  std::size_t distractors = 3;
  // arithmetic
  std::size_t vocab_size = 10;
  std::size_t sequence_length = 1;
  std::size_t projection_dim = 16;

  std::size_t feature_dim() const noexcept {
    return kind == DatasetKind::Irt ? 1 + distractors : projection_dim;
  }
};

/// Answer key of an arithmetic question: token t is (a + b + t) mod V.
inline TokenSequence arithmetic_answer(std::int64_t a, std::int64_t b, std::size_t vocab,
                                       std::size_t sequence_length) {
  TokenSequence ans(sequence_length);
  const auto v = static_cast<std::int64_t>(vocab);
  for (std::size_t t = 0; t < sequence_length; ++t) {
    ans[t] = static_cast<int>(((a + b + static_cast<std::int64_t>(t)) % v + v) % v);
  }
  return ans;
}

namespace detail {
inline std::vector<double> arithmetic_projection(const DatasetSpec& spec) {
  const std::size_t in = 2 * spec.vocab_size;
  std::vector<double> proj(spec.projection_dim * in);
  Rng rng{stream::kProjection, spec.seed};
  const double scale = 1.0 / std::sqrt(static_cast<double>(spec.projection_dim));
  for (auto& w : proj) w = scale * rng.normal();
  return proj;
}
}  // namespace detail

inline Question make_question(const DatasetSpec& spec, QuestionId id, const std::vector<double>& projection) {
  Question q;
  q.id = id;
  Rng rng{stream::kDataset, spec.seed, id};
  if (spec.kind == DatasetKind::Irt) {
    q.difficulty = rng.normal(spec.difficulty_mean, spec.difficulty_std);
    const double observed = q.difficulty + spec.feature_noise * rng.normal();
    q.features.push_back((observed - spec.difficulty_mean) / spec.difficulty_std);
    for (std::size_t i = 0; i < spec.distractors; ++i) q.features.push_back(rng.normal());
  } else {
    const auto v = static_cast<std::int64_t>(spec.vocab_size);
    const auto a = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(v)));
    const auto b = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(v)));
    q.payload.operands = {a, b};
    q.payload.answer = arithmetic_answer(a, b, spec.vocab_size, spec.sequence_length);
    const std::size_t in = 2 * spec.vocab_size;
    q.features.assign(spec.projection_dim, 0.0);
    for (std::size_t r = 0; r < spec.projection_dim; ++r) {
      q.features[r] = projection[r * in + static_cast<std::size_t>(a)] +
                      projection[r * in + spec.vocab_size + static_cast<std::size_t>(b)];
    }
  }
  return q;
}

/// Questions with ids [first_id, first_id + n).
inline std::vector<Question> generate_dataset(const DatasetSpec& spec, std::int64_t n, QuestionId first_id = 0) {
  if (n <= 0) throw Error(ErrorCode::InvalidSize, "dataset size must be >= 1");
  if (spec.kind == DatasetKind::Irt && !(spec.difficulty_std > 0.0)) {
    throw Error(ErrorCode::Config, "dataset.difficulty_std must be > 0");
  }
  if (spec.kind == DatasetKind::Arithmetic && (spec.vocab_size < 2 || spec.projection_dim == 0)) {
    throw Error(ErrorCode::Config, "arithmetic datasets need vocab_size >= 2 and projection_dim >= 1");
  }
  const auto projection =
      spec.kind == DatasetKind::Arithmetic ? detail::arithmetic_projection(spec) : std::vector<double>{};
  std::vector<Question> out;
  out.reserve(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) out.push_back(make_question(spec, first_id + static_cast<QuestionId>(i), projection));
  return out;
}

inline std::vector<Question> generate_dataset(const DatasetSpec& spec) { return generate_dataset(spec, spec.size); }

/// Held-out questions: ids continue after the training set and come from a
/// separate seed stream.
inline std::vector<Question> generate_validation(const DatasetSpec& spec, std::int64_t n) {
  if (n <= 0) throw Error(ErrorCode::InvalidSize, "validation size must be >= 1");
  DatasetSpec v = spec;
  v.seed = derive_seed({stream::kValidation, spec.seed});
  if (spec.kind == DatasetKind::Arithmetic) {
    // same projection as the training set; only the operand draws differ
    auto projection = detail::arithmetic_projection(spec);
    std::vector<Question> out;
    for (std::int64_t i = 0; i < n; ++i) {
      out.push_back(make_question(v, static_cast<QuestionId>(spec.size + i), projection));
    }
    return out;
  }
  return generate_dataset(v, n, static_cast<QuestionId>(spec.size));
}

// ---------------------------------------------------------------------------
// Record file: one JSON object per line. Doubles are written in shortest
// round-trip form, so export -> import -> export is byte-identical.
// ---------------------------------------------------------------------------

inline nlohmann::json question_to_json(const Question& q) {
  nlohmann::json payload = nlohmann::json::object();
  if (!q.payload.operands.empty()) payload["operands"] = q.payload.operands;
  if (!q.payload.answer.empty()) payload["answer"] = q.payload.answer;
  return nlohmann::json{{"id", q.id}, {"features", q.features}, {"difficulty", q.difficulty}, {"payload", payload}};
}

inline Question question_from_json(const nlohmann::json& j) {
  try {
    Question q;
    q.id = j.at("id").get<QuestionId>();
    q.features = j.at("features").get<std::vector<double>>();
    q.difficulty = j.at("difficulty").get<double>();
    const auto& p = j.at("payload");
    if (p.contains("operands")) q.payload.operands = p.at("operands").get<std::vector<std::int64_t>>();
    if (p.contains("answer")) q.payload.answer = p.at("answer").get<TokenSequence>();
    return q;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidInput, std::string("bad question record: ") + e.what());
  }
}

inline void write_dataset(std::ostream& os, const std::vector<Question>& questions) {
  for (const auto& q : questions) os << question_to_json(q).dump() << '\n';
}

inline void write_dataset(const std::filesystem::path& path, const std::vector<Question>& questions) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorCode::Io, "cannot open " + path.string() + " for writing");
  write_dataset(os, questions);
  if (!os) throw Error(ErrorCode::Io, "write failed: " + path.string());
}

inline std::vector<Question> read_dataset(std::istream& is) {
  std::vector<Question> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(question_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::InvalidInput, "line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<Question> read_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::Io, "cannot open " + path.string());
  return read_dataset(is);
}

}  // namespace goldilocks
