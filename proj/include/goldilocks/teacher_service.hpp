// SPDX-License-Identifier: Apache-2.0
#pragma once

// The teacher actor. Every selection and every feedback record goes through
// handle(); a refinement pass scheduled by a feedback record runs in
// run_scheduled_update(), which the transport calls after the ack has been
// written. Transports serialize calls to one instance.

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "goldilocks/dataset.hpp"
#include "goldilocks/error.hpp"
#include "goldilocks/protocol.hpp"
#include "goldilocks/rng.hpp"
#include "goldilocks/teacher.hpp"

namespace goldilocks {

using ConnectionId = std::uint64_t;

struct SessionState {
  ConnectionId id = 0;
  std::uint64_t samples_served = 0;
  std::uint64_t feedback_received = 0;
  std::multiset<QuestionId> pending;
  std::uint64_t last_seq = 0;
  std::uint64_t reply_seq = 0;
  std::vector<UpdateSummary> queued_reports;
  bool closed = false;
};

class TeacherService {
 public:
  TeacherService(Teacher teacher, std::vector<Question> dataset, std::size_t group_size, std::uint64_t selection_seed)
      : teacher_(std::move(teacher)), dataset_(std::move(dataset)), group_size_(group_size),
        selection_seed_(selection_seed) {
    if (group_size_ < 2) throw Error(ErrorCode::Config, "group size must be >= 2");
    if (dataset_.size() < teacher_.config().candidate_size) {
      throw Error(ErrorCode::InsufficientCandidates,
                  "dataset has " + std::to_string(dataset_.size()) + " questions, need " +
                      std::to_string(teacher_.config().candidate_size));
    }
    for (std::size_t i = 0; i < dataset_.size(); ++i) index_.emplace(dataset_[i].id, i);
  }

  ConnectionId open_session() {
    const ConnectionId id = next_connection_++;
    sessions_[id].id = id;
    return id;
  }

  const SessionState& session(ConnectionId id) const {
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw Error(ErrorCode::Protocol, "unknown connection " + std::to_string(id));
    return it->second;
  }

  const Teacher& teacher() const noexcept { return teacher_; }
  std::size_t group_size() const noexcept { return group_size_; }
  std::uint64_t selections() const noexcept { return selections_; }
  std::uint64_t teacher_calls() const noexcept { return teacher_calls_; }
  bool update_scheduled() const noexcept { return scheduled_for_.has_value(); }

  /// Decodes one frame and handles it; decode failures become error replies.
  WireMessage handle_line(ConnectionId conn, const std::string& line) {
    WireMessage request;
    try {
      request = decode(line);
    } catch (const Error& e) {
      return error_reply(sessions_.at(conn), std::nullopt, e.code(), e.what());
    }
    return handle(conn, request);
  }

  WireMessage handle(ConnectionId conn, const WireMessage& request) {
    auto it = sessions_.find(conn);
    if (it == sessions_.end()) throw Error(ErrorCode::Protocol, "unknown connection " + std::to_string(conn));
    SessionState& s = it->second;
    if (s.closed) return error_reply(s, request.seq, ErrorCode::Protocol, "session is shut down");
    if (request.seq <= s.last_seq) {
      return error_reply(s, request.seq, ErrorCode::Protocol,
                         "sequence number " + std::to_string(request.seq) + " does not increase");
    }
    s.last_seq = request.seq;
    switch (request.type) {
      case MessageType::RequestSample: return on_request(s, request);
      case MessageType::Feedback: return on_feedback(s, request);
      case MessageType::Shutdown: return on_shutdown(s, request);
      default:
        return error_reply(s, request.seq, ErrorCode::Protocol,
                           "unexpected message type '" + to_string(request.type) + "'");
    }
  }

  /// Runs the refinement pass scheduled by the last feedback, if any. Its
  /// report is attached to the next reply on the connection that sent that
  /// feedback.
  void run_scheduled_update() {
    if (!scheduled_for_) return;
    const ConnectionId conn = *scheduled_for_;
    scheduled_for_.reset();
    if (auto report = teacher_.maybe_update()) {
      sessions_.at(conn).queued_reports.push_back(UpdateSummary::from(*report));
    }
  }

 private:
  WireMessage reply(SessionState& s, MessageType type, std::uint64_t reply_to) {
    WireMessage m;
    m.type = type;
    m.seq = ++s.reply_seq;
    m.reply_to = reply_to;
    return m;
  }

  WireMessage error_reply(SessionState& s, std::optional<std::uint64_t> reply_to, ErrorCode code,
                          const std::string& reason) {
    WireMessage m;
    m.type = MessageType::Error;
    m.seq = ++s.reply_seq;
    m.reply_to = reply_to;
    m.error = to_string(code);
    m.reason = reason;
    return m;
  }

  WireMessage on_request(SessionState& s, const WireMessage& request) {
    Rng rng{stream::kSelect, selection_seed_, selections_};
    ++selections_;
    ++teacher_calls_;
    const Selection sel = select_query(teacher_.model(), dataset_, teacher_.config(), rng);
    const PredictionStats stats = summarize(sel.predictions);
    const Question& q = dataset_[sel.index];
    s.pending.insert(q.id);
    ++s.samples_served;
    WireMessage m = reply(s, MessageType::Sample, request.seq);
    m.question_id = q.id;
    m.payload = q;
    m.teacher_mu = stats.mean;
    m.teacher_sigma = stats.std;
    m.model_version = teacher_.updates();
    m.reports = std::exchange(s.queued_reports, {});
    return m;
  }

  WireMessage on_feedback(SessionState& s, const WireMessage& request) {
    const QuestionId id = *request.question_id;
    const auto& rewards = *request.rewards;
    auto pend = s.pending.find(id);
    if (pend == s.pending.end()) {
      return error_reply(s, request.seq, ErrorCode::UnknownQuestion,
                         "question " + std::to_string(id) + " is not pending on this connection");
    }
    if (rewards.size() != group_size_) {
      return error_reply(s, request.seq, ErrorCode::InvalidGroup,
                         "expected " + std::to_string(group_size_) + " rewards, got " + std::to_string(rewards.size()));
    }
    if (std::any_of(rewards.begin(), rewards.end(), [](int r) { return r != 0 && r != 1; })) {
      return error_reply(s, request.seq, ErrorCode::InvalidGroup, "rewards must be 0 or 1");
    }
    RolloutGroup group;
    group.question_id = id;
    group.rewards_ver = rewards;
    group.rewards_format.assign(rewards.size(), 0.0);
    teacher_.record(dataset_[index_.at(id)], group);
    ++teacher_calls_;
    s.pending.erase(pend);
    ++s.feedback_received;
    if (teacher_.update_due()) scheduled_for_ = s.id;
    WireMessage m = reply(s, MessageType::Ack, request.seq);
    m.question_id = id;
    m.update_scheduled = scheduled_for_.has_value();
    return m;
  }

  WireMessage on_shutdown(SessionState& s, const WireMessage& request) {
    WireMessage m = reply(s, MessageType::Ack, request.seq);
    m.pending = std::vector<QuestionId>(s.pending.begin(), s.pending.end());
    m.reports = std::exchange(s.queued_reports, {});
    s.closed = true;
    return m;
  }

  Teacher teacher_;
  std::vector<Question> dataset_;
  std::unordered_map<QuestionId, std::size_t> index_;
  std::size_t group_size_;
  std::uint64_t selection_seed_;
  std::uint64_t selections_ = 0;
  std::uint64_t teacher_calls_ = 0;
  std::optional<ConnectionId> scheduled_for_;
  std::map<ConnectionId, SessionState> sessions_;
  ConnectionId next_connection_ = 1;
};

}  // namespace goldilocks
