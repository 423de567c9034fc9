// SPDX-License-Identifier: Apache-2.0
#pragma once

// Teacher/student wire messages. One JSON object per line; every frame
// carries the protocol version "v" and a per-connection, per-sender
// sequence number "seq". Replies also carry "reply_to".
//
//   student -> teacher   request_sample {}
//                        feedback       {question_id, rewards[G]}
//                        shutdown       {}
//   teacher -> student   sample   {payload, teacher_mu, teacher_sigma, model_version, reports[]}
//                        ack      {question_id?, update_scheduled?, pending[]?, reports[]}
//                        error    {error, reason}
//
// `reports` lists teacher updates triggered by this connection's previous
// feedback that completed after the corresponding ack was sent.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "goldilocks/dataset.hpp"
#include "goldilocks/error.hpp"
#include "goldilocks/teacher.hpp"

namespace goldilocks {

inline constexpr int kProtocolVersion = 1;

enum class MessageType { RequestSample, Sample, Feedback, Ack, Shutdown, Error };

inline std::string to_string(MessageType t) {
  switch (t) {
    case MessageType::RequestSample: return "request_sample";
    case MessageType::Sample: return "sample";
    case MessageType::Feedback: return "feedback";
    case MessageType::Ack: return "ack";
    case MessageType::Shutdown: return "shutdown";
    case MessageType::Error: return "error";
  }
  return "?";
}

inline MessageType message_type_from_string(const std::string& s) {
  if (s == "request_sample") return MessageType::RequestSample;
  if (s == "sample") return MessageType::Sample;
  if (s == "feedback") return MessageType::Feedback;
  if (s == "ack") return MessageType::Ack;
  if (s == "shutdown") return MessageType::Shutdown;
  if (s == "error") return MessageType::Error;
  throw Error(ErrorCode::Protocol, "unknown message type '" + s + "'");
}

/// Compact form of an UpdateReport as it travels on the wire.
struct UpdateSummary {
  std::uint64_t update_index = 0;
  double unseen_mae = std::numeric_limits<double>::quiet_NaN();
  std::size_t unseen_count = 0;
  std::vector<double> epoch_mse;
  bool skipped = false;

  static UpdateSummary from(const UpdateReport& r) {
    return {r.update_index, r.unseen_mae, r.unseen_count, r.epoch_mse, r.skipped};
  }
};

struct WireMessage {
  MessageType type = MessageType::RequestSample;
  std::uint64_t seq = 0;
  std::optional<std::uint64_t> reply_to;
  std::optional<QuestionId> question_id;
  std::optional<Question> payload;
  std::optional<std::vector<int>> rewards;
  // teacher-side annotations
  std::optional<double> teacher_mu;
  std::optional<double> teacher_sigma;
  std::optional<std::uint64_t> model_version;
  std::optional<bool> update_scheduled;
  std::optional<std::vector<QuestionId>> pending;
  std::vector<UpdateSummary> reports;
  // errors
  std::optional<std::string> error;
  std::optional<std::string> reason;
};

namespace detail {
inline nlohmann::json number_or_null(double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); }
inline double number_or_nan(const nlohmann::json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}
}  // namespace detail

inline nlohmann::json to_json(const WireMessage& m) {
  nlohmann::json j;
  j["v"] = kProtocolVersion;
  j["type"] = to_string(m.type);
  j["seq"] = m.seq;
  if (m.reply_to) j["reply_to"] = *m.reply_to;
  if (m.question_id) j["question_id"] = *m.question_id;
  if (m.payload) j["payload"] = question_to_json(*m.payload);
  if (m.rewards) j["rewards"] = *m.rewards;
  if (m.teacher_mu) j["teacher_mu"] = *m.teacher_mu;
  if (m.teacher_sigma) j["teacher_sigma"] = *m.teacher_sigma;
  if (m.model_version) j["model_version"] = *m.model_version;
  if (m.update_scheduled) j["update_scheduled"] = *m.update_scheduled;
  if (m.pending) j["pending"] = *m.pending;
  if (!m.reports.empty()) {
    auto arr = nlohmann::json::array();
    for (const auto& r : m.reports) {
      arr.push_back({{"update_index", r.update_index},
                     {"unseen_mae", detail::number_or_null(r.unseen_mae)},
                     {"unseen_count", r.unseen_count},
                     {"epoch_mse", r.epoch_mse},
                     {"skipped", r.skipped}});
    }
    j["reports"] = std::move(arr);
  }
  if (m.error) j["error"] = *m.error;
  if (m.reason) j["reason"] = *m.reason;
  return j;
}

/// One frame, without the trailing newline.
inline std::string encode(const WireMessage& m) { return to_json(m).dump(); }

inline WireMessage decode(const std::string& line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Protocol, std::string("frame is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw Error(ErrorCode::Protocol, "frame is not a JSON object");
  try {
    if (!j.contains("v") || j.at("v").get<int>() != kProtocolVersion) {
      throw Error(ErrorCode::Protocol, "missing or unsupported protocol version");
    }
    WireMessage m;
    m.type = message_type_from_string(j.at("type").get<std::string>());
    m.seq = j.at("seq").get<std::uint64_t>();
    if (j.contains("reply_to")) m.reply_to = j["reply_to"].get<std::uint64_t>();
    if (j.contains("question_id")) m.question_id = j["question_id"].get<QuestionId>();
    if (j.contains("payload")) m.payload = question_from_json(j["payload"]);
    if (j.contains("rewards")) m.rewards = j["rewards"].get<std::vector<int>>();
    if (j.contains("teacher_mu")) m.teacher_mu = j["teacher_mu"].get<double>();
    if (j.contains("teacher_sigma")) m.teacher_sigma = j["teacher_sigma"].get<double>();
    if (j.contains("model_version")) m.model_version = j["model_version"].get<std::uint64_t>();
    if (j.contains("update_scheduled")) m.update_scheduled = j["update_scheduled"].get<bool>();
    if (j.contains("pending")) m.pending = j["pending"].get<std::vector<QuestionId>>();
    if (j.contains("reports")) {
      for (const auto& r : j["reports"]) {
        UpdateSummary s;
        s.update_index = r.at("update_index").get<std::uint64_t>();
        s.unseen_mae = detail::number_or_nan(r.at("unseen_mae"));
        s.unseen_count = r.at("unseen_count").get<std::size_t>();
        s.epoch_mse = r.at("epoch_mse").get<std::vector<double>>();
        s.skipped = r.at("skipped").get<bool>();
        m.reports.push_back(std::move(s));
      }
    }
    if (j.contains("error")) m.error = j["error"].get<std::string>();
    if (j.contains("reason")) m.reason = j["reason"].get<std::string>();
    switch (m.type) {
      case MessageType::Sample:
        if (!m.payload) throw Error(ErrorCode::Protocol, "sample frame without payload");
        break;
      case MessageType::Feedback:
        if (!m.question_id || !m.rewards) throw Error(ErrorCode::Protocol, "feedback frame needs question_id and rewards");
        break;
      default:
        break;
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Protocol, std::string("malformed frame: ") + e.what());
  }
}

}  // namespace goldilocks
