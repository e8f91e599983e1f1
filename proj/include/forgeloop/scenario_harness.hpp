#pragma once

#include "forgeloop/executor.hpp"
#include "forgeloop/llm_gateway.hpp"
#include "forgeloop/loop_controller.hpp"
#include "forgeloop/session_state.hpp"
#include "forgeloop/transcript.hpp"

#include <atomic>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <variant>
#include <vector>

namespace httplib {
class Server;
}

namespace forgeloop::scenario {

class ScenarioParseError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Port binding, file seeding, missing scenario files. Never an assertion failure.
class ScenarioInfrastructureError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct StubRoute {
  std::string path;
  std::string body;
  std::string content_type = "text/plain";
  // Every listed query parameter must be present with this value, else 403.
  std::map<std::string, std::string> require_query;
};

// Serves only the configured routes on 127.0.0.1; everything else is 404.
class StubWebService {
public:
  explicit StubWebService(std::vector<StubRoute> routes);
  ~StubWebService();
  StubWebService(const StubWebService &) = delete;
  StubWebService &operator=(const StubWebService &) = delete;

  void start(); // binds an ephemeral port; throws ScenarioInfrastructureError
  void stop();
  int port() const noexcept { return port_; }
  std::string base_url() const;
  std::size_t hits() const noexcept { return hits_; }

private:
  std::vector<StubRoute> routes_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
  int port_ = 0;
  std::atomic<std::size_t> hits_{0};
};

struct FileExists {
  std::string path;
};
struct FileContains {
  std::string path;
  std::string text;
};
struct FileEquals {
  std::string path;
  std::string content;
};
enum class Occurrence { First, Last };
struct CommandOutputEquals {
  std::string command;
  std::string expected;
  Occurrence occurrence = Occurrence::Last;
};
struct SessionEndedIn {
  Status status = Status::AwaitingHuman;
  std::optional<PauseReason> reason;
};
// First whitespace-separated token of each stdout line, top to bottom.
struct RankingEquals {
  std::string command;
  std::vector<std::string> expected;
};
// Stdout lines of the last run, compared as a set.
struct OutputSetEquals {
  std::string command;
  std::vector<std::string> expected;
};
struct PauseCount {
  PauseReason reason = PauseReason::MarkerRequested;
  std::size_t count = 0;
};

using Assertion =
    std::variant<FileExists, FileContains, FileEquals, CommandOutputEquals, SessionEndedIn, RankingEquals,
                 OutputSetEquals, PauseCount>;

std::string describe(const Assertion &assertion);

struct InitialFile {
  std::string path; // relative to the session directory
  std::string content;
};

struct Scenario {
  std::string name;
  std::string task;
  std::string os = "Linux";
  std::vector<std::string> resume_inputs;
  std::vector<llm::ScriptEntry> script;
  std::vector<InitialFile> initial_files;
  std::vector<StubRoute> stub_routes;
  exec::PolicySettings policy;
  std::size_t max_steps = 30;
  std::vector<exec::ApprovalDecision> approvals; // consumed in order, then TimedOut
  std::vector<Assertion> assertions;
};

// `source:` and `body_file:` paths resolve against base_dir.
Scenario parse_scenario(std::string_view yaml, const std::filesystem::path &base_dir);
Scenario load_scenario(const std::filesystem::path &file);
// <dir>/<name>.yaml; throws ScenarioInfrastructureError when absent.
Scenario find_scenario(const std::filesystem::path &dir, std::string_view name);
std::vector<std::string> list_scenarios(const std::filesystem::path &dir);

struct AssertionResult {
  std::string description;
  bool passed = false;
  std::string detail;
};

struct ScenarioReport {
  std::string name;
  std::vector<AssertionResult> assertions;
  SessionState final_state;
  std::string transcript_hash;
  std::vector<transcript::TranscriptEvent> events;
  std::filesystem::path session_dir;
  std::int64_t elapsed_ms = 0;

  bool passed() const;
};

struct RunOptions {
  // Fresh temporary directory when unset. Must not already hold a transcript.
  std::optional<std::filesystem::path> session_dir;
  bool keep_session_dir = false; // temporary directories are removed unless set
  transcript::Durability durability = transcript::Durability::Flush;
  parser::ParserConfig parser;
  // Replaces the scenario script (transcript replay uses this).
  std::optional<std::vector<llm::ScriptEntry>> script;
  bool record_scenario_name = true; // session_created carries the scenario name
  bool close_at_end = false;
  std::function<void(loop::Session &)> configure_session;
};

// Environment variable that carries the stub base URL to executed commands.
inline constexpr const char *kStubUrlEnv = "STUB_BASE_URL";

ScenarioReport run_scenario(const Scenario &scenario, const RunOptions &options = {});

std::vector<AssertionResult> evaluate(const Scenario &scenario, const std::vector<transcript::TranscriptEvent> &events,
                                      const SessionState &state, const std::filesystem::path &session_dir);

struct ReplayReport {
  std::string recorded_hash;
  std::string replayed_hash;
  std::optional<ScenarioReport> scenario_report;
  bool matched() const { return recorded_hash == replayed_hash; }
};

// Re-executes a recorded transcript from its model responses and human inputs.
// A transcript produced by a scenario is re-seeded from that scenario.
ReplayReport replay_transcript(const std::filesystem::path &transcript_path, const std::filesystem::path &scenarios_dir,
                               const parser::ParserConfig &parser = {});

} // namespace forgeloop::scenario
