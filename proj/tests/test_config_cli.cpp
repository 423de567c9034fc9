// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <regex>
#include <set>
#include <sstream>

#include "cli.hpp"
#include "goldilocks/config.hpp"

using namespace goldilocks;
namespace fs = std::filesystem;

namespace {

const std::string kCli = GOLDILOCKS_CLI;
const std::string kConfigs = GOLDILOCKS_CONFIG_DIR;

struct Outcome {
  int code = -1;
  std::string output;  // stdout and stderr interleaved
};

Outcome shell(const std::string& cmd) {
  Outcome o;
  FILE* p = ::popen((cmd + " 2>&1").c_str(), "r");
  if (!p) return o;
  char buf[4096];
  while (std::fgets(buf, sizeof(buf), p)) o.output += buf;
  const int status = ::pclose(p);
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return o;
}

std::string read_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("goldilocks_cli_" + name);
  fs::remove_all(p);
  return p;
}

ExperimentConfig parse(const std::string& text) {
  std::istringstream is(text);
  return parse_config(is);
}

}  // namespace

// --- config ---------------------------------------------------------------------

TEST(Config, ParsesKeysCommentsAndBlankLines) {
  const auto cfg = parse(
      "# comment\n"
      "schema_version = 1\n"
      "\n"
      "student.irt.initial_skill = -3   # trailing\n"
      "dataset.size = 123\n"
      "loss.variant = dapo\n"
      "run.compute_ratio = 4/3\n"
      "student.frozen = true\n");
  EXPECT_EQ(cfg.irt.skill, -3.0);
  EXPECT_EQ(cfg.dataset.size, 123);
  EXPECT_EQ(cfg.loss.variant, LossVariant::Dapo);
  EXPECT_EQ(cfg.compute_ratio.num, 4);
  EXPECT_EQ(cfg.compute_ratio.den, 3);
  EXPECT_TRUE(cfg.student_frozen);
}

TEST(Config, UnknownKeyIsNamedExactly) {
  try {
    parse("schema_version = 1\nteacher.epsilonn = 0.3\n");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Config);
    EXPECT_NE(std::string(e.what()).find("'teacher.epsilonn'"), std::string::npos) << e.what();
  }
}

TEST(Config, BadValuesAndSchemaAreRejected) {
  EXPECT_THROW(parse("teacher.epsilon = 0.3\n"), Error);  // schema_version must lead
  EXPECT_THROW(parse("schema_version = 2\n"), Error);
  EXPECT_THROW(parse("schema_version = 1\nteacher.epsilon = lots\n"), Error);
  EXPECT_THROW(parse("schema_version = 1\nloss.variant = ppo\n"), Error);
  EXPECT_THROW(parse("schema_version = 1\nno equals sign\n"), Error);
  try {
    parse("schema_version = 1\nteacher.epsilon = 1.5\n").validate();
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("teacher.epsilon"), std::string::npos);
  }
}

TEST(Config, OverridesAndSeed) {
  ExperimentConfig cfg;
  apply_override(cfg, "run.group_size=8");
  apply_override(cfg, " teacher.pooling = last_position ");
  EXPECT_EQ(cfg.group_size, 8u);
  EXPECT_EQ(cfg.teacher.pooling, Pooling::LastPosition);
  EXPECT_THROW(apply_override(cfg, "run.group_size"), Error);
  EXPECT_THROW(apply_override(cfg, "nope=1"), Error);
  apply_seed(cfg, 7);
  EXPECT_EQ(cfg.seeds.dataset, 7u);
  EXPECT_EQ(cfg.seeds.student, 7u);
  EXPECT_EQ(cfg.seeds.teacher, 7u);
  EXPECT_EQ(cfg.seeds.selection, 7u);
}

TEST(Config, TextRoundTripCoversEveryKey) {
  auto cfg = load_config(kConfigs + "/reference_irt.conf");
  apply_override(cfg, "teacher.epsilon=0.1234567890123");
  const std::string text = to_config_text(cfg);
  for (const auto& k : config_keys()) EXPECT_NE(text.find(k.name + " = "), std::string::npos) << k.name;
  const auto back = parse(text);
  EXPECT_EQ(to_config_text(back), text);
  EXPECT_EQ(back.teacher.epsilon, 0.1234567890123);
}

TEST(Config, ShippedConfigsValidate) {
  for (const auto& entry : fs::directory_iterator(kConfigs)) {
    if (entry.path().extension() != ".conf") continue;
    EXPECT_NO_THROW(load_config(entry.path()).validate()) << entry.path();
  }
}

TEST(Config, StudentAndDatasetKindsMustMatch) {
  auto cfg = parse("schema_version = 1\nstudent.kind = policy\n");
  EXPECT_THROW(cfg.validate(), Error);
}

// --- help text ------------------------------------------------------------------

TEST(Cli, HelpDocumentsExactlyTheAcceptedFlags) {
  cli::Options o;
  auto app = cli::build_app(o);
  const auto subs = app->get_subcommands([](CLI::App*) { return true; });
  ASSERT_EQ(subs.size(), 6u);
  const std::regex flag(R"((?:^|[\s,\[])(--?[A-Za-z][A-Za-z0-9-]*))");
  for (auto* sub : subs) {
    const std::string help = sub->help();
    std::set<std::string> accepted{"-h", "--help"};
    for (const auto* opt : sub->get_options()) {
      for (const auto& s : opt->get_snames()) accepted.insert("-" + s);
      for (const auto& l : opt->get_lnames()) accepted.insert("--" + l);
      for (const auto& s : opt->get_snames()) EXPECT_NE(help.find("-" + s), std::string::npos) << sub->get_name();
      for (const auto& l : opt->get_lnames()) EXPECT_NE(help.find("--" + l), std::string::npos) << sub->get_name();
      EXPECT_FALSE(opt->get_description().empty()) << sub->get_name() << " " << opt->get_name();
    }
    for (auto it = std::sregex_iterator(help.begin(), help.end(), flag); it != std::sregex_iterator(); ++it) {
      EXPECT_TRUE(accepted.count((*it)[1].str())) << sub->get_name() << " documents unknown flag " << (*it)[1];
    }
  }
}

TEST(Cli, NoArgumentsPrintsUsage) {
  const auto r = shell(kCli);
  EXPECT_NE(r.code, 0);
  for (const char* sub : {"gen-data", "run", "serve", "client", "compare", "report"}) {
    EXPECT_NE(r.output.find(sub), std::string::npos) << sub;
  }
}

// --- end to end -------------------------------------------------------------------

TEST(Cli, BadKeyExitsNonzeroNamingIt) {
  const auto out = scratch("badkey");
  const auto r = shell(kCli + " run -c " + kConfigs + "/smoke.conf --set teacher.epsilom=0.5 -o " + out.string());
  EXPECT_EQ(r.code, cli::kConfigError);
  EXPECT_NE(r.output.find("teacher.epsilom"), std::string::npos) << r.output;
  EXPECT_FALSE(fs::exists(out));
}

TEST(Cli, FailedRunRemovesPartialOutputs) {
  const auto out = scratch("partial");
  const auto r =
      shell(kCli + " run -c " + kConfigs + "/smoke.conf --dataset /nonexistent/questions.jsonl -o " + out.string());
  EXPECT_NE(r.code, 0);
  EXPECT_FALSE(fs::exists(out)) << r.output;

  // an existing directory is kept, only the files this run wrote go away
  fs::create_directories(out);
  std::ofstream(out / "keep.txt") << "x";
  EXPECT_NE(shell(kCli + " run -c " + kConfigs + "/smoke.conf --dataset /nonexistent -o " + out.string()).code, 0);
  EXPECT_TRUE(fs::exists(out / "keep.txt"));
  EXPECT_FALSE(fs::exists(out / "config.txt"));
  EXPECT_FALSE(fs::exists(out / "goldilocks.csv"));
  fs::remove_all(out);
}

TEST(Cli, BaselineRunConstructsNoTeacher) {
  const auto out = scratch("baseline");
  const auto r = shell(kCli + " run --mode baseline -c " + kConfigs + "/smoke.conf -o " + out.string());
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("baseline: teacher instances constructed: 0"), std::string::npos) << r.output;
  EXPECT_TRUE(fs::exists(out / "baseline.csv"));
  EXPECT_FALSE(fs::exists(out / "teacher.json"));
  fs::remove_all(out);
}

TEST(Cli, LogVerbosityFromEnvironment) {
  const auto out = scratch("quiet");
  const auto r = shell("GOLDILOCKS_LOG=off " + kCli + " run -c " + kConfigs + "/smoke.conf -o " + out.string());
  EXPECT_EQ(r.code, 0);
  EXPECT_TRUE(r.output.empty()) << r.output;
  fs::remove_all(out);
}

TEST(Cli, CompareTwiceIsByteIdentical) {
  const auto a = scratch("cmp_a");
  const auto b = scratch("cmp_b");
  const std::string args = " compare -c " + kConfigs + "/smoke.conf --set run.total_steps=12 --seed 1 -o ";
  ASSERT_EQ(shell(kCli + args + a.string()).code, 0);
  ASSERT_EQ(shell(kCli + args + b.string()).code, 0);
  int files = 0;
  for (const auto& e : fs::directory_iterator(a)) {
    ++files;
    EXPECT_EQ(read_file(e.path()), read_file(b / e.path().filename())) << e.path().filename();
  }
  EXPECT_GE(files, 12);
  EXPECT_TRUE(fs::exists(a / "summary.json"));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Cli, GenDataThenRunFromFileMatchesGenerated) {
  const auto dir = scratch("gendata");
  fs::create_directories(dir);
  const auto data = dir / "train.jsonl";
  ASSERT_EQ(shell(kCli + " gen-data -c " + kConfigs + "/smoke.conf -o " + data.string() + " --validation-out " +
                  (dir / "val.jsonl").string())
                .code,
            0);
  EXPECT_TRUE(fs::exists(dir / "val.jsonl"));
  ASSERT_EQ(shell(kCli + " run -c " + kConfigs + "/smoke.conf --dataset " + data.string() + " -o " +
                  (dir / "from_file").string())
                .code,
            0);
  ASSERT_EQ(shell(kCli + " run -c " + kConfigs + "/smoke.conf -o " + (dir / "generated").string()).code, 0);
  EXPECT_EQ(read_file(dir / "from_file" / "goldilocks.csv"), read_file(dir / "generated" / "goldilocks.csv"));
  fs::remove_all(dir);
}

TEST(Cli, ReportFromExistingCsvs) {
  const auto dir = scratch("report");
  ASSERT_EQ(shell(kCli + " run -c " + kConfigs + "/smoke.conf --set run.total_steps=6 -o " + dir.string()).code, 0);
  ASSERT_EQ(
      shell(kCli + " run --mode baseline -c " + kConfigs + "/smoke.conf --set run.total_steps=6 -o " + dir.string())
          .code,
      0);
  const auto r = shell(kCli + " report -c " + kConfigs + "/smoke.conf --goldilocks " + (dir / "goldilocks.csv").string() +
                       " --baseline " + (dir / "baseline.csv").string() + " -o " + (dir / "report").string());
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_TRUE(fs::exists(dir / "report" / "validation_accuracy.svg"));
  // an empty metrics file fails and leaves nothing behind
  std::ofstream(dir / "empty.csv") << kCsvHeader << '\n';
  const auto bad = shell(kCli + " report --goldilocks " + (dir / "empty.csv").string() + " --baseline " +
                         (dir / "baseline.csv").string() + " -o " + (dir / "bad").string());
  EXPECT_NE(bad.code, 0);
  EXPECT_FALSE(fs::exists(dir / "bad"));
  fs::remove_all(dir);
}

TEST(Cli, ServeAndClientMatchGoldenTranscript) {
  const auto dir = scratch("serve");
  fs::create_directories(dir);
  const auto port_file = dir / "port";
  const auto transcript = dir / "transcript.txt";
  const std::string conf = kConfigs + "/smoke.conf";
  const std::string script = kCli + " serve -c " + conf + " --port 0 --sessions 1 --port-file " + port_file.string() +
                             " & pid=$!; n=0; while [ ! -s " + port_file.string() +
                             " ] && [ $n -lt 200 ]; do sleep 0.05; n=$((n+1)); done; " + kCli + " client -c " + conf +
                             " --port $(cat " + port_file.string() + ") -o " + (dir / "out").string() +
                             " --transcript " + transcript.string() + "; rc=$?; wait $pid; exit $((rc + $?))";
  const auto r = shell("sh -c '" + script + "'");
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(read_file(transcript), read_file(std::string(GOLDILOCKS_TEST_DATA) + "/golden_transcript.txt"));
  fs::remove_all(dir);
}

TEST(Cli, ClientWithoutServerIsATransportError) {
  const auto dir = scratch("noserver");
  const auto r = shell(kCli + " client -c " + kConfigs + "/smoke.conf --port 1 -o " + dir.string());
  EXPECT_EQ(r.code, cli::kTransportError) << r.output;
  EXPECT_FALSE(fs::exists(dir));
}
