// SPDX-License-Identifier: Apache-2.0
#pragma once

// Experiment configuration and its text form.
//
// File format: one `key = value` per line, `#` starts a comment, blank lines
// ignored. The first setting must be `schema_version = 1`. Keys are flat and
// dotted; every key is listed in config_keys() and printed, with its current
// value, by to_config_text(). Unknown keys are rejected by name.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "goldilocks/dataset.hpp"
#include "goldilocks/error.hpp"
#include "goldilocks/grpo_core.hpp"
#include "goldilocks/metrics.hpp"
#include "goldilocks/students.hpp"
#include "goldilocks/teacher.hpp"

namespace goldilocks {

inline constexpr int kConfigSchemaVersion = 1;

enum class StudentKind { Irt, Policy };
enum class RunMode { Goldilocks, Baseline };

inline std::string to_string(RunMode m) { return m == RunMode::Goldilocks ? "goldilocks" : "baseline"; }

inline RunMode run_mode_from_string(std::string_view s) {
  if (s == "goldilocks") return RunMode::Goldilocks;
  if (s == "baseline") return RunMode::Baseline;
  throw Error(ErrorCode::Config, "mode must be goldilocks or baseline, got '" + std::string(s) + "'");
}

struct SeedConfig {
  std::uint64_t dataset = 1;
  std::uint64_t student = 1;
  std::uint64_t teacher = 1;
  std::uint64_t selection = 1;
};

struct ServerConfig {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;
  double timeout_seconds = 30.0;
};

struct ExperimentConfig {
  StudentKind student_kind = StudentKind::Irt;
  bool student_frozen = false;
  IrtStudentState irt{};
  PolicyStudentConfig policy{};
  DatasetSpec dataset{};
  std::int64_t validation_size = 500;
  TeacherConfig teacher{};
  LossConfig loss{};
  RewardConfig reward{};
  std::size_t group_size = 16;
  std::size_t batch_size = 12;
  std::int64_t total_steps = 2000;
  Ratio compute_ratio{8, 6};
  std::int64_t eval_every = 200;
  double ema_alpha = 0.9;
  SeedConfig seeds{};
  ServerConfig server{};

  /// Dataset spec with the dataset seed applied.
  DatasetSpec dataset_spec() const {
    DatasetSpec s = dataset;
    s.seed = seeds.dataset;
    return s;
  }

  /// Policy-student settings with the vocabulary taken from the dataset.
  PolicyStudentConfig policy_config() const {
    PolicyStudentConfig p = policy;
    p.vocab_size = dataset.vocab_size;
    p.sequence_length = dataset.sequence_length;
    return p;
  }

  void validate() const {
    auto fail = [](const std::string& key, const std::string& why) { throw Error(ErrorCode::Config, key + ": " + why); };
    if (group_size < 2) fail("run.group_size", "must be >= 2");
    if (batch_size == 0) fail("run.batch_size", "must be positive");
    if (total_steps <= 0) fail("run.total_steps", "must be positive");
    if (eval_every <= 0) fail("run.eval_every", "must be positive");
    if (compute_ratio.num <= 0 || compute_ratio.den <= 0 || compute_ratio.num < compute_ratio.den) {
      fail("run.compute_ratio", "must be a positive ratio >= 1");
    }
    if (!(ema_alpha > 0.0 && ema_alpha <= 1.0)) fail("run.ema_alpha", "must lie in (0, 1]");
    if (dataset.size <= 0) fail("dataset.size", "must be positive");
    if (validation_size <= 0) fail("dataset.validation_size", "must be positive");
    if (!(dataset.difficulty_std > 0.0)) fail("dataset.difficulty_std", "must be positive");
    if (dataset.feature_noise < 0.0) fail("dataset.feature_noise", "must be >= 0");
    if (dataset.vocab_size < 2) fail("dataset.vocab_size", "must be >= 2");
    if (dataset.sequence_length == 0) fail("dataset.sequence_length", "must be positive");
    if (dataset.projection_dim == 0) fail("dataset.projection_dim", "must be positive");
    if (student_kind == StudentKind::Policy && dataset.kind != DatasetKind::Arithmetic) {
      fail("student.kind", "the policy student needs dataset.kind = arithmetic");
    }
    if (student_kind == StudentKind::Irt && dataset.kind != DatasetKind::Irt) {
      fail("student.kind", "the irt student needs dataset.kind = irt");
    }
    if (!(irt.discrimination > 0.0)) fail("student.irt.discrimination", "must be positive");
    if (!(irt.learn_rate > 0.0)) fail("student.irt.learn_rate", "must be positive");
    if (!(policy.temperature_train > 0.0)) fail("student.policy.temperature_train", "must be positive");
    if (policy.temperature_eval < 0.0) fail("student.policy.temperature_eval", "must be >= 0");
    if (!(policy.learn_rate > 0.0)) fail("student.policy.learn_rate", "must be positive");
    if (reward.format_warmup_steps < 0) fail("reward.format_warmup_steps", "must be >= 0");
    if (reward.format_noise_amplitude < 0.0) fail("reward.format_noise_amplitude", "must be >= 0");
    if (!(server.timeout_seconds > 0.0)) fail("server.timeout_seconds", "must be positive");
    teacher.validate();
    loss.validate();
    if (static_cast<std::int64_t>(teacher.candidate_size) > dataset.size) {
      fail("teacher.candidate_size", "exceeds dataset.size");
    }
  }
};

// ---------------------------------------------------------------------------
// Key table
// ---------------------------------------------------------------------------

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_config_number(std::string_view key, std::string_view v) {
  T out{};
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc{} || res.ptr != v.data() + v.size()) {
    throw Error(ErrorCode::Config, std::string(key) + ": cannot parse '" + std::string(v) + "'");
  }
  return out;
}

inline bool parse_config_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw Error(ErrorCode::Config, std::string(key) + ": expected true or false, got '" + std::string(v) + "'");
}

inline std::string format_config_real(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

template <class E>
struct EnumName {
  E value;
  const char* name;
};

template <class E, std::size_t N>
E parse_config_enum(std::string_view key, std::string_view v, const EnumName<E> (&names)[N]) {
  std::string allowed;
  for (const auto& n : names) {
    if (v == n.name) return n.value;
    allowed += allowed.empty() ? "" : ", ";
    allowed += n.name;
  }
  throw Error(ErrorCode::Config, std::string(key) + ": expected one of {" + allowed + "}, got '" + std::string(v) + "'");
}

template <class E, std::size_t N>
std::string format_config_enum(E v, const EnumName<E> (&names)[N]) {
  for (const auto& n : names) {
    if (n.value == v) return n.name;
  }
  return "?";
}

inline constexpr EnumName<StudentKind> kStudentKinds[] = {{StudentKind::Irt, "irt"}, {StudentKind::Policy, "policy"}};
inline constexpr EnumName<DatasetKind> kDatasetKinds[] = {{DatasetKind::Irt, "irt"},
                                                         {DatasetKind::Arithmetic, "arithmetic"}};
inline constexpr EnumName<Pooling> kPoolings[] = {{Pooling::Mean, "mean"}, {Pooling::LastPosition, "last_position"}};
inline constexpr EnumName<TeacherOptimizer> kOptimizers[] = {
    {TeacherOptimizer::Sgd, "sgd"}, {TeacherOptimizer::Momentum, "momentum"}, {TeacherOptimizer::Adam, "adam"}};
inline constexpr EnumName<LossVariant> kVariants[] = {
    {LossVariant::Grpo, "grpo"}, {LossVariant::Dapo, "dapo"}, {LossVariant::GrpoEntropy, "grpo_entropy"}};
inline constexpr EnumName<ZeroStdPolicy> kZeroStd[] = {{ZeroStdPolicy::ZeroAdvantage, "zero_advantage"}};

}  // namespace detail

struct ConfigKey {
  std::string name;
  std::string help;
  std::function<void(ExperimentConfig&, std::string_view)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

namespace detail {

template <class T, class Access>
ConfigKey number_key(std::string name, std::string help, Access access) {
  ConfigKey k;
  k.name = name;
  k.help = std::move(help);
  k.set = [name, access](ExperimentConfig& c, std::string_view v) { access(c) = parse_config_number<T>(name, v); };
  k.get = [access](const ExperimentConfig& c) {
    auto& mc = const_cast<ExperimentConfig&>(c);
    if constexpr (std::is_floating_point_v<T>) {
      return format_config_real(access(mc));
    } else {
      return std::to_string(access(mc));
    }
  };
  return k;
}

template <class E, std::size_t N, class Access>
ConfigKey enum_key(std::string name, std::string help, const EnumName<E> (&names)[N], Access access) {
  ConfigKey k;
  k.name = name;
  k.help = std::move(help);
  k.set = [name, access, &names](ExperimentConfig& c, std::string_view v) { access(c) = parse_config_enum(name, v, names); };
  k.get = [access, &names](const ExperimentConfig& c) {
    return format_config_enum(access(const_cast<ExperimentConfig&>(c)), names);
  };
  return k;
}

}  // namespace detail

/// Every accepted key, in documentation order.
inline const std::vector<ConfigKey>& config_keys() {
  using detail::enum_key;
  using detail::number_key;
  using C = ExperimentConfig;
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    k.push_back(enum_key("student.kind", "irt | policy", detail::kStudentKinds,
                         [](C& c) -> StudentKind& { return c.student_kind; }));
    {
      ConfigKey frozen;
      frozen.name = "student.frozen";
      frozen.help = "true: rollouts are drawn but the student never updates";
      frozen.set = [](C& c, std::string_view v) { c.student_frozen = detail::parse_config_bool("student.frozen", v); };
      frozen.get = [](const C& c) { return std::string(c.student_frozen ? "true" : "false"); };
      k.push_back(std::move(frozen));
    }
    k.push_back(number_key<double>("student.irt.initial_skill", "starting skill s",
                                   [](C& c) -> double& { return c.irt.skill; }));
    k.push_back(number_key<double>("student.irt.discrimination", "slope a of p = sigmoid(a (s - d))",
                                   [](C& c) -> double& { return c.irt.discrimination; }));
    k.push_back(number_key<double>("student.irt.learn_rate", "skill step per unit sqrt(p_hat (1 - p_hat))",
                                   [](C& c) -> double& { return c.irt.learn_rate; }));
    k.push_back(number_key<double>("student.policy.temperature_train", "sampling temperature for rollouts",
                                   [](C& c) -> double& { return c.policy.temperature_train; }));
    k.push_back(number_key<double>("student.policy.temperature_eval", "evaluation temperature, 0 = greedy",
                                   [](C& c) -> double& { return c.policy.temperature_eval; }));
    k.push_back(number_key<double>("student.policy.learn_rate", "gradient step size",
                                   [](C& c) -> double& { return c.policy.learn_rate; }));
    k.push_back(number_key<double>("student.policy.init_scale", "std of the initial weights",
                                   [](C& c) -> double& { return c.policy.init_scale; }));
    k.push_back(enum_key("dataset.kind", "irt | arithmetic", detail::kDatasetKinds,
                         [](C& c) -> DatasetKind& { return c.dataset.kind; }));
    k.push_back(number_key<std::int64_t>("dataset.size", "training questions",
                                         [](C& c) -> std::int64_t& { return c.dataset.size; }));
    k.push_back(number_key<std::int64_t>("dataset.validation_size", "held-out questions",
                                         [](C& c) -> std::int64_t& { return c.validation_size; }));
    k.push_back(number_key<double>("dataset.difficulty_mean", "irt: mean of d",
                                   [](C& c) -> double& { return c.dataset.difficulty_mean; }));
    k.push_back(number_key<double>("dataset.difficulty_std", "irt: std of d",
                                   [](C& c) -> double& { return c.dataset.difficulty_std; }));
    k.push_back(number_key<double>("dataset.feature_noise",
                                   "irt: std of the noise added to d in feature 0 (signal std is difficulty_std)",
                                   [](C& c) -> double& { return c.dataset.feature_noise; }));
    k.push_back(number_key<std::size_t>("dataset.distractors", "irt: N(0,1) features carrying no signal",
                                        [](C& c) -> std::size_t& { return c.dataset.distractors; }));
    k.push_back(number_key<std::size_t>("dataset.vocab_size", "arithmetic: modulus and vocabulary V",
                                        [](C& c) -> std::size_t& { return c.dataset.vocab_size; }));
    k.push_back(number_key<std::size_t>("dataset.sequence_length", "arithmetic: answer tokens T",
                                        [](C& c) -> std::size_t& { return c.dataset.sequence_length; }));
    k.push_back(number_key<std::size_t>("dataset.projection_dim", "arithmetic: feature dimension",
                                        [](C& c) -> std::size_t& { return c.dataset.projection_dim; }));
    k.push_back(number_key<std::size_t>("teacher.candidate_size", "K candidates per selection",
                                        [](C& c) -> std::size_t& { return c.teacher.candidate_size; }));
    k.push_back(number_key<double>("teacher.epsilon", "probability of a uniform pick among the candidates",
                                   [](C& c) -> double& { return c.teacher.epsilon; }));
    k.push_back(number_key<std::size_t>("teacher.replay_capacity", "sliding-window size",
                                        [](C& c) -> std::size_t& { return c.teacher.replay_capacity; }));
    k.push_back(number_key<std::size_t>("teacher.update_every", "feedback records between refinement passes",
                                        [](C& c) -> std::size_t& { return c.teacher.update_every; }));
    k.push_back(number_key<std::size_t>("teacher.epochs_per_update", "epochs over the buffer per pass",
                                        [](C& c) -> std::size_t& { return c.teacher.epochs_per_update; }));
    k.push_back(number_key<std::size_t>("teacher.batch_size", "mini-batch size",
                                        [](C& c) -> std::size_t& { return c.teacher.batch_size; }));
    k.push_back(number_key<double>("teacher.learn_rate", "step size",
                                   [](C& c) -> double& { return c.teacher.learn_rate; }));
    k.push_back(number_key<double>("teacher.temperature_tau", "accepted, not used by selection",
                                   [](C& c) -> double& { return c.teacher.temperature_tau; }));
    k.push_back(number_key<std::size_t>("teacher.hidden_dim", "encoder width",
                                        [](C& c) -> std::size_t& { return c.teacher.hidden_dim; }));
    k.push_back(number_key<std::size_t>("teacher.positions", "feature chunks treated as token positions",
                                        [](C& c) -> std::size_t& { return c.teacher.positions; }));
    k.push_back(enum_key("teacher.pooling", "mean | last_position", detail::kPoolings,
                         [](C& c) -> Pooling& { return c.teacher.pooling; }));
    k.push_back(enum_key("teacher.optimizer", "sgd | momentum | adam", detail::kOptimizers,
                         [](C& c) -> TeacherOptimizer& { return c.teacher.optimizer; }));
    k.push_back(number_key<double>("teacher.momentum", "momentum / adam beta1",
                                   [](C& c) -> double& { return c.teacher.momentum; }));
    k.push_back(number_key<double>("teacher.init_scale", "encoder init scale",
                                   [](C& c) -> double& { return c.teacher.init_scale; }));
    k.push_back(enum_key("loss.variant", "grpo | dapo | grpo_entropy", detail::kVariants,
                         [](C& c) -> LossVariant& { return c.loss.variant; }));
    k.push_back(number_key<double>("loss.entropy_beta", "entropy bonus weight",
                                   [](C& c) -> double& { return c.loss.entropy_beta; }));
    k.push_back(number_key<double>("loss.clip_low", "dapo lower clip", [](C& c) -> double& { return c.loss.clip_low; }));
    k.push_back(number_key<double>("loss.clip_high", "dapo upper clip",
                                   [](C& c) -> double& { return c.loss.clip_high; }));
    k.push_back(enum_key("loss.zero_std_policy", "zero_advantage", detail::kZeroStd,
                         [](C& c) -> ZeroStdPolicy& { return c.loss.zero_std_policy; }));
    k.push_back(number_key<int>("loss.dapo_max_resamples", "redraws of a non-mixed dapo group",
                                [](C& c) -> int& { return c.loss.dapo_max_resamples; }));
    k.push_back(number_key<double>("reward.format_constant", "format reward after warmup",
                                   [](C& c) -> double& { return c.reward.format_constant; }));
    k.push_back(number_key<std::int64_t>("reward.format_warmup_steps", "steps with a perturbed format reward",
                                         [](C& c) -> std::int64_t& { return c.reward.format_warmup_steps; }));
    k.push_back(number_key<double>("reward.format_noise_amplitude", "bound of the warmup perturbation",
                                   [](C& c) -> double& { return c.reward.format_noise_amplitude; }));
    k.push_back(number_key<std::uint64_t>("reward.noise_seed", "seed of the warmup perturbation",
                                          [](C& c) -> std::uint64_t& { return c.reward.noise_seed; }));
    k.push_back(number_key<std::size_t>("run.group_size", "rollouts G per question",
                                        [](C& c) -> std::size_t& { return c.group_size; }));
    k.push_back(number_key<std::size_t>("run.batch_size", "questions per student update",
                                        [](C& c) -> std::size_t& { return c.batch_size; }));
    k.push_back(number_key<std::int64_t>("run.total_steps", "student updates of the goldilocks arm",
                                         [](C& c) -> std::int64_t& { return c.total_steps; }));
    {
      ConfigKey ratio;
      ratio.name = "run.compute_ratio";
      ratio.help = "baseline steps per goldilocks step, as num/den";
      ratio.set = [](C& c, std::string_view v) {
        const auto slash = v.find('/');
        if (slash == std::string_view::npos) {
          c.compute_ratio = {detail::parse_config_number<std::int64_t>("run.compute_ratio", v), 1};
        } else {
          c.compute_ratio = {detail::parse_config_number<std::int64_t>("run.compute_ratio", detail::trim(v.substr(0, slash))),
                             detail::parse_config_number<std::int64_t>("run.compute_ratio", detail::trim(v.substr(slash + 1)))};
        }
      };
      ratio.get = [](const C& c) { return std::to_string(c.compute_ratio.num) + "/" + std::to_string(c.compute_ratio.den); };
      k.push_back(std::move(ratio));
    }
    k.push_back(number_key<std::int64_t>("run.eval_every", "goldilocks steps between validations",
                                         [](C& c) -> std::int64_t& { return c.eval_every; }));
    k.push_back(number_key<double>("run.ema_alpha", "smoothing for reported series",
                                   [](C& c) -> double& { return c.ema_alpha; }));
    k.push_back(number_key<std::uint64_t>("seed.dataset", "", [](C& c) -> std::uint64_t& { return c.seeds.dataset; }));
    k.push_back(number_key<std::uint64_t>("seed.student", "", [](C& c) -> std::uint64_t& { return c.seeds.student; }));
    k.push_back(number_key<std::uint64_t>("seed.teacher", "", [](C& c) -> std::uint64_t& { return c.seeds.teacher; }));
    k.push_back(number_key<std::uint64_t>("seed.selection", "",
                                          [](C& c) -> std::uint64_t& { return c.seeds.selection; }));
    {
      ConfigKey host;
      host.name = "server.host";
      host.help = "bind / connect address";
      host.set = [](C& c, std::string_view v) { c.server.host = std::string(v); };
      host.get = [](const C& c) { return c.server.host; };
      k.push_back(std::move(host));
    }
    k.push_back(number_key<std::uint16_t>("server.port", "0 picks a free port",
                                          [](C& c) -> std::uint16_t& { return c.server.port; }));
    k.push_back(number_key<double>("server.timeout_seconds", "client receive timeout",
                                   [](C& c) -> double& { return c.server.timeout_seconds; }));
    return k;
  }();
  return keys;
}

inline void set_config_value(ExperimentConfig& cfg, std::string_view key, std::string_view value) {
  for (const auto& k : config_keys()) {
    if (k.name == key) {
      k.set(cfg, detail::trim(value));
      return;
    }
  }
  throw Error(ErrorCode::Config, "unknown config key '" + std::string(key) + "'");
}

/// Applies one `key=value` override.
inline void apply_override(ExperimentConfig& cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) {
    throw Error(ErrorCode::Config, "override '" + std::string(assignment) + "' is not key=value");
  }
  set_config_value(cfg, detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

/// Sets all four seeds to `seed`; the streams stay independent through their tags.
inline void apply_seed(ExperimentConfig& cfg, std::uint64_t seed) {
  cfg.seeds = {seed, seed, seed, seed};
}

inline ExperimentConfig parse_config(std::istream& is, ExperimentConfig cfg = {}) {
  std::string line;
  int lineno = 0;
  bool saw_version = false;
  while (std::getline(is, line)) {
    ++lineno;
    std::string_view v = line;
    if (const auto hash = v.find('#'); hash != std::string_view::npos) v = v.substr(0, hash);
    v = detail::trim(v);
    if (v.empty()) continue;
    const auto eq = v.find('=');
    if (eq == std::string_view::npos) {
      throw Error(ErrorCode::Config, "line " + std::to_string(lineno) + ": expected key = value");
    }
    const auto key = detail::trim(v.substr(0, eq));
    const auto value = detail::trim(v.substr(eq + 1));
    if (key == "schema_version") {
      const int version = detail::parse_config_number<int>("schema_version", value);
      if (version != kConfigSchemaVersion) {
        throw Error(ErrorCode::Config, "schema_version: unsupported version " + std::to_string(version));
      }
      saw_version = true;
      continue;
    }
    if (!saw_version) throw Error(ErrorCode::Config, "schema_version must be set before '" + std::string(key) + "'");
    set_config_value(cfg, key, value);
  }
  if (!saw_version) throw Error(ErrorCode::Config, "schema_version: missing");
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorCode::Io, "cannot open config " + path.string());
  return parse_config(is);
}

/// Every key with its current value; parse_config(to_config_text(c)) == c.
inline std::string to_config_text(const ExperimentConfig& cfg) {
  std::ostringstream os;
  os << "schema_version = " << kConfigSchemaVersion << '\n';
  for (const auto& k : config_keys()) os << k.name << " = " << k.get(cfg) << '\n';
  return os.str();
}

}  // namespace goldilocks
