// SPDX-License-Identifier: Apache-2.0
#pragma once

// Command-line front end. Kept in a header so tests can build the same
// CLI::App and check its help output against the registered options.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include "goldilocks/config.hpp"
#include "goldilocks/dataset.hpp"
#include "goldilocks/harness.hpp"
#include "goldilocks/metrics.hpp"
#include "goldilocks/net.hpp"
#include "goldilocks/report.hpp"

namespace goldilocks::cli {

inline constexpr const char* kLogEnv = "GOLDILOCKS_LOG";

enum ExitCode : int { kOk = 0, kFailure = 1, kConfigError = 2, kTransportError = 3 };

struct Options {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string mode = "goldilocks";
  std::string out;
  std::string validation_out;
  std::string transcript;
  std::string dataset;
  std::optional<std::string> host;
  std::optional<std::uint16_t> port;
  std::optional<double> timeout;
  std::size_t sessions = 0;
  std::string port_file;
  std::string goldilocks_csv;
  std::string baseline_csv;
};

inline void add_config_options(CLI::App& sub, Options& o) {
  sub.add_option("-c,--config", o.config, "Config file (key = value lines, schema_version = 1)");
  sub.add_option("--set", o.sets, "Override one config key, as key=value (repeatable)");
  sub.add_option("--seed", o.seed, "Set seed.dataset, seed.student, seed.teacher and seed.selection");
}

inline std::unique_ptr<CLI::App> build_app(Options& o) {
  auto app = std::make_unique<CLI::App>(
      "Teacher-driven curriculum for group-relative policy optimization on synthetic students.\n"
      "Log verbosity: set " + std::string(kLogEnv) + " to trace, debug, info, warn, error or off.",
      "goldilocks");
  app->require_subcommand(1);

  auto* gen = app->add_subcommand("gen-data", "Write the training (and optionally validation) questions as JSON lines");
  add_config_options(*gen, o);
  gen->add_option("-o,--out", o.out, "Training set output file")->required();
  gen->add_option("--validation-out", o.validation_out, "Validation set output file");

  auto* run = app->add_subcommand("run", "Train one arm in process and write its metrics CSV");
  add_config_options(*run, o);
  run->add_option("--mode", o.mode, "goldilocks or baseline")->check(CLI::IsMember({"goldilocks", "baseline"}));
  run->add_option("-o,--out", o.out, "Output directory")->required();
  run->add_option("--dataset", o.dataset, "Training questions file from gen-data (default: generate)");
  run->add_option("--transcript", o.transcript, "Write the teacher message transcript here (goldilocks)");

  auto* serve = app->add_subcommand("serve", "Run the teacher as a TCP server");
  add_config_options(*serve, o);
  serve->add_option("--host", o.host, "Bind address (default server.host)");
  serve->add_option("--port", o.port, "Port, 0 picks a free one (default server.port)");
  serve->add_option("--dataset", o.dataset, "Training questions file from gen-data (default: generate)");
  serve->add_option("--sessions", o.sessions, "Exit after this many clients shut down (0: run until killed)");
  serve->add_option("--port-file", o.port_file, "Write the bound port to this file once listening");

  auto* client = app->add_subcommand("client", "Train the student against a running teacher server");
  add_config_options(*client, o);
  client->add_option("--host", o.host, "Server address (default server.host)");
  client->add_option("--port", o.port, "Server port (default server.port)");
  client->add_option("--timeout", o.timeout, "Seconds to wait for each reply (default server.timeout_seconds)");
  client->add_option("-o,--out", o.out, "Output directory")->required();
  client->add_option("--transcript", o.transcript, "Write the message transcript here");

  auto* compare = app->add_subcommand("compare", "Run both arms and write the aligned report");
  add_config_options(*compare, o);
  compare->add_option("-o,--out", o.out, "Output directory")->required();

  auto* report = app->add_subcommand("report", "Render the report from two existing metrics CSVs");
  add_config_options(*report, o);
  report->add_option("--goldilocks", o.goldilocks_csv, "Goldilocks metrics CSV")->required();
  report->add_option("--baseline", o.baseline_csv, "Baseline metrics CSV")->required();
  report->add_option("-o,--out", o.out, "Output directory")->required();
  return app;
}

/// Removes the files (and the directory, if it created it) unless committed.
class OutputGuard {
 public:
  explicit OutputGuard(std::filesystem::path dir = {}) : dir_(std::move(dir)) {
    if (!dir_.empty() && !std::filesystem::exists(dir_)) {
      std::filesystem::create_directories(dir_);
      created_dir_ = true;
    }
  }
  OutputGuard(const OutputGuard&) = delete;
  OutputGuard& operator=(const OutputGuard&) = delete;
  ~OutputGuard() {
    if (committed_) return;
    std::error_code ec;
    for (const auto& f : files_) std::filesystem::remove(f, ec);
    if (created_dir_) std::filesystem::remove_all(dir_, ec);
  }

  std::filesystem::path track(std::filesystem::path p) {
    files_.push_back(p);
    return p;
  }
  void track(const std::vector<std::filesystem::path>& ps) { files_.insert(files_.end(), ps.begin(), ps.end()); }
  void commit() { committed_ = true; }

 private:
  std::filesystem::path dir_;
  std::vector<std::filesystem::path> files_;
  bool created_dir_ = false;
  bool committed_ = false;
};

inline ExperimentConfig resolve_config(const Options& o) {
  ExperimentConfig cfg = o.config.empty() ? ExperimentConfig{} : load_config(o.config);
  if (o.seed) apply_seed(cfg, *o.seed);
  for (const auto& s : o.sets) apply_override(cfg, s);
  if (o.host) cfg.server.host = *o.host;
  if (o.port) cfg.server.port = *o.port;
  if (o.timeout) cfg.server.timeout_seconds = *o.timeout;
  cfg.validate();
  return cfg;
}

inline std::ofstream open_output(const std::filesystem::path& p) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw Error(ErrorCode::Io, "cannot write " + p.string());
  return os;
}

inline void write_file(OutputGuard& guard, const std::filesystem::path& p, const std::string& text) {
  auto os = open_output(guard.track(p));
  os << text;
  if (!os) throw Error(ErrorCode::Io, "write failed: " + p.string());
}

/// Streams rows into `<dir>/<name>.csv`, flushed after each batch of final rows.
inline RowSink csv_sink(std::ofstream& os) {
  os << kCsvHeader << '\n';
  return [&os](std::span<const MetricsRecord> rows) {
    for (const auto& r : rows) os << to_csv_row(r) << '\n';
    os.flush();
  };
}

inline void log_run(const RunResult& r, const ExperimentConfig& cfg) {
  spdlog::info("{}: {} rows over {} steps, teacher calls {}", to_string(r.mode), r.rows.size(),
               r.rows.empty() ? 0 : r.rows.back().step, r.teacher_calls);
  try {
    const auto limit = r.mode == RunMode::Goldilocks ? cfg.total_steps : aligned_step(cfg.total_steps, cfg.compute_ratio);
    spdlog::info("{}: final accuracy (last 5 evaluations) {:.6f}", to_string(r.mode), final_accuracy(r.rows, 5, limit));
  } catch (const Error&) {
    spdlog::info("{}: fewer than 5 evaluations, no final accuracy", to_string(r.mode));
  }
}

inline int cmd_gen_data(const Options& o) {
  const auto cfg = resolve_config(o);
  OutputGuard guard;
  const auto spec = cfg.dataset_spec();
  auto train = generate_dataset(spec);
  {
    auto os = open_output(guard.track(o.out));
    write_dataset(os, train);
  }
  spdlog::info("wrote {} {} questions to {}", train.size(), to_string(spec.kind), o.out);
  if (!o.validation_out.empty()) {
    auto val = generate_validation(spec, cfg.validation_size);
    auto os = open_output(guard.track(o.validation_out));
    write_dataset(os, val);
    spdlog::info("wrote {} validation questions to {}", val.size(), o.validation_out);
  }
  guard.commit();
  return kOk;
}

inline int cmd_run(const Options& o) {
  const auto cfg = resolve_config(o);
  const RunMode mode = run_mode_from_string(o.mode);
  OutputGuard guard(o.out);
  const std::filesystem::path dir(o.out);
  write_file(guard, dir / "config.txt", to_config_text(cfg));
  auto csv = open_output(guard.track(dir / (to_string(mode) + ".csv")));
  std::ofstream transcript;
  RunOptions opts;
  opts.sink = csv_sink(csv);
  if (!o.transcript.empty()) {
    transcript = open_output(guard.track(o.transcript));
    opts.transcript = &transcript;
  }
  if (!o.dataset.empty()) opts.dataset = read_dataset(std::filesystem::path(o.dataset));
  const auto before = Teacher::constructed();
  const RunResult r = run_experiment(cfg, mode, opts);
  const auto teachers = Teacher::constructed() - before;
  if (mode == RunMode::Baseline) {
    spdlog::info("baseline: teacher instances constructed: {}", teachers);
  } else {
    r.teacher_model->save(guard.track(dir / "teacher.json"));
  }
  log_run(r, cfg);
  guard.commit();
  return kOk;
}

inline int cmd_serve(const Options& o) {
  const auto cfg = resolve_config(o);
  auto dataset = o.dataset.empty() ? generate_dataset(cfg.dataset_spec()) : read_dataset(std::filesystem::path(o.dataset));
  TeacherServer server(make_teacher_service(cfg, std::move(dataset)), cfg.server.host, cfg.server.port, o.sessions);
  spdlog::info("teacher listening on {}:{}", cfg.server.host, server.port());
  OutputGuard guard;
  if (!o.port_file.empty()) {
    const std::filesystem::path tmp = o.port_file + ".tmp";
    {
      auto os = open_output(guard.track(tmp));
      os << server.port() << '\n';
    }
    std::filesystem::rename(tmp, o.port_file);
  }
  guard.commit();
  server.wait();
  server.stop();
  const auto served = server.inspect([](const TeacherService& s) { return s.selections(); });
  spdlog::info("teacher served {} samples, {} updates", served,
               server.inspect([](const TeacherService& s) { return s.teacher().updates(); }));
  return kOk;
}

inline int cmd_client(const Options& o) {
  const auto cfg = resolve_config(o);
  OutputGuard guard(o.out);
  const std::filesystem::path dir(o.out);
  write_file(guard, dir / "config.txt", to_config_text(cfg));
  auto csv = open_output(guard.track(dir / "goldilocks.csv"));
  std::ofstream transcript;
  if (!o.transcript.empty()) transcript = open_output(guard.track(o.transcript));
  RemoteSource source(cfg.server.host, cfg.server.port, cfg.server.timeout_seconds,
                      o.transcript.empty() ? nullptr : &transcript);
  const RunResult r = run_with_source(cfg, RunMode::Goldilocks, source, csv_sink(csv));
  log_run(r, cfg);
  guard.commit();
  return kOk;
}

inline nlohmann::json summary_json(const ComparisonSummary& s) {
  return {{"window_start", s.window_start},
          {"goldilocks_final_accuracy", s.goldilocks_final_accuracy},
          {"baseline_final_accuracy", s.baseline_final_accuracy},
          {"goldilocks_zero_variance_ema", s.goldilocks_zero_variance},
          {"baseline_zero_variance_ema", s.baseline_zero_variance},
          {"goldilocks_mean_reward", s.goldilocks_mean_reward},
          {"baseline_mean_reward", s.baseline_mean_reward}};
}

inline int write_comparison(const std::vector<MetricsRecord>& gold, const std::vector<MetricsRecord>& base,
                            const ExperimentConfig& cfg, OutputGuard& guard, const std::filesystem::path& dir) {
  guard.track(emit_report(gold, base, dir, {cfg.compute_ratio, cfg.ema_alpha}));
  const auto window = std::min<std::int64_t>(500, gold.back().step);
  const auto s = summarize_comparison(gold, base, cfg.compute_ratio, cfg.ema_alpha, window);
  write_file(guard, dir / "summary.json", summary_json(s).dump(2) + "\n");
  spdlog::info("final accuracy: goldilocks {:.6f} baseline {:.6f}", s.goldilocks_final_accuracy,
               s.baseline_final_accuracy);
  spdlog::info("zero-variance fraction (EMA, steps {}+): goldilocks {:.4f} baseline {:.4f}", s.window_start,
               s.goldilocks_zero_variance, s.baseline_zero_variance);
  spdlog::info("mean training reward (steps {}+): goldilocks {:.4f} baseline {:.4f}", s.window_start,
               s.goldilocks_mean_reward, s.baseline_mean_reward);
  return kOk;
}

inline int cmd_compare(const Options& o) {
  const auto cfg = resolve_config(o);
  OutputGuard guard(o.out);
  const std::filesystem::path dir(o.out);
  write_file(guard, dir / "config.txt", to_config_text(cfg));
  const auto gold = run_experiment(cfg, RunMode::Goldilocks);
  log_run(gold, cfg);
  const auto base = run_experiment(cfg, RunMode::Baseline);
  log_run(base, cfg);
  write_comparison(gold.rows, base.rows, cfg, guard, dir);
  guard.commit();
  return kOk;
}

inline int cmd_report(const Options& o) {
  const auto cfg = resolve_config(o);
  const auto gold = read_csv(std::filesystem::path(o.goldilocks_csv));
  const auto base = read_csv(std::filesystem::path(o.baseline_csv));
  if (gold.empty() || base.empty()) throw Error(ErrorCode::EmptyReport, "a metrics file has no rows");
  OutputGuard guard(o.out);
  write_comparison(gold, base, cfg, guard, o.out);
  guard.commit();
  return kOk;
}

inline void configure_logging() {
  auto logger = spdlog::stderr_logger_mt("goldilocks");
  logger->set_pattern("goldilocks: [%l] %v");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::info);
  if (const char* env = std::getenv(kLogEnv)) spdlog::set_level(spdlog::level::from_str(env));
}

inline int run_cli(int argc, char** argv) {
  Options o;
  auto app = build_app(o);
  if (argc <= 1) {
    std::cout << app->help();
    return kConfigError;
  }
  try {
    app->parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app->exit(e);
  }
  if (!spdlog::get("goldilocks")) configure_logging();
  const std::string sub = app->get_subcommands().front()->get_name();
  try {
    if (sub == "gen-data") return cmd_gen_data(o);
    if (sub == "run") return cmd_run(o);
    if (sub == "serve") return cmd_serve(o);
    if (sub == "client") return cmd_client(o);
    if (sub == "compare") return cmd_compare(o);
    if (sub == "report") return cmd_report(o);
  } catch (const Error& e) {
    spdlog::error("{}", e.what());
    if (e.code() == ErrorCode::Config) return kConfigError;
    if (e.code() == ErrorCode::Transport) return kTransportError;
    return kFailure;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kFailure;
  }
  return kFailure;
}

}  // namespace goldilocks::cli
