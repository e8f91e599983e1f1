#pragma once

#include "forgeloop/executor.hpp"
#include "forgeloop/llm_gateway.hpp"
#include "forgeloop/message.hpp"
#include "forgeloop/prompt_engine.hpp"
#include "forgeloop/response_parser.hpp"
#include "forgeloop/session_state.hpp"
#include "forgeloop/snippet_store.hpp"
#include "forgeloop/transcript.hpp"

#include <atomic>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace forgeloop::loop {

class InvalidState : public std::logic_error {
public:
  using std::logic_error::logic_error;
};

class BlankTask : public std::invalid_argument {
public:
  BlankTask() : std::invalid_argument("task text must not be blank") {}
};

struct StepOutcome {
  enum class Kind { Continue, Pause, Failed };
  Kind kind = Kind::Continue;
  std::optional<PauseReason> reason;

  static StepOutcome proceed() { return {Kind::Continue, std::nullopt}; }
  static StepOutcome pause(PauseReason r) { return {Kind::Pause, r}; }
  static StepOutcome failed() { return {Kind::Failed, std::nullopt}; }
  bool operator==(const StepOutcome &) const = default;
};

struct StepRecord {
  std::size_t step_index = 0;
  std::string prompt_digest;
  std::optional<llm::ModelResponse> response; // empty when the query itself failed
  parser::ParsedResponse parsed;
  std::vector<snippets::StagedSnippet> staged;
  std::vector<exec::ExecutionRecord> executions;
  StepOutcome outcome;
  std::string failure; // set when outcome is Failed
};

// Everything a session needs besides its own state. References must outlive the session.
struct LoopDeps {
  llm::ModelBackend *model = nullptr;
  exec::Executor *executor = nullptr;
  exec::ApprovalOracle *approval = nullptr; // null: approvals time out immediately
  parser::ParserConfig parser;
  exec::Policy policy;
  prompts::PromptTemplateSet templates = prompts::PromptTemplateSet::defaults();
  prompts::Facts env_facts;
  std::size_t history_window = 20;
  std::string model_id = "gpt-4-1106-preview";
  double temperature = 0.0;
  // Scrubbed from everything the session writes to its transcript.
  std::vector<std::string> secrets;
};

struct SessionOptions {
  std::string session_id;
  std::filesystem::path session_dir;
  std::size_t max_steps = 30;
  std::optional<std::string> scenario;
  transcript::Durability durability = transcript::Durability::Fsync;
};

// Outer task loop and inner step loop as an explicit state machine. A session
// is driven from one thread; observers read the transcript.
class Session {
public:
  // Starts a fresh session (appends session_created). Throws std::invalid_argument on max_steps == 0.
  static std::unique_ptr<Session> create(SessionOptions options, LoopDeps deps);
  // Rebuilds state and message history from <session_dir>/transcript.jsonl; an
  // in-flight step is rolled back.
  static std::unique_ptr<Session> restore(const std::filesystem::path &session_dir, LoopDeps deps,
                                          transcript::Durability durability = transcript::Durability::Fsync);

  // AwaitingTask -> Stepping (initial prompt) or AwaitingHuman/Failed -> Stepping (resume).
  const SessionState &submit_task(std::string_view text);

  // One iteration: query, parse, stage code, run commands, render the next prompt.
  StepRecord step();

  // Steps until a pause, a failure, the per-turn max_steps bound, or step_budget.
  std::vector<StepRecord> run_until_pause(std::optional<std::size_t> step_budget = std::nullopt);

  void close();

  // Checked at step boundaries by run_until_pause; pauses with Interrupted.
  void request_stop() { stop_requested_ = true; }

  // Stepping -> AwaitingHuman(Interrupted) between steps; no-op in other states.
  void interrupt();

  const SessionState &state() const noexcept { return state_; }
  const std::shared_ptr<transcript::Transcript> &log() const noexcept { return transcript_; }
  const std::vector<Message> &history() const noexcept { return history_; }
  const Message &system_message() const noexcept { return system_; }
  LoopDeps &deps() noexcept { return deps_; }

  // The messages the next query would send: system plus the history window.
  std::vector<Message> next_request_messages() const;

  void on_transition(std::function<void(Status from, Status to)> fn) { on_transition_ = std::move(fn); }
  void on_step_boundary(std::function<void(const SessionState &, const StepRecord &)> fn) {
    on_step_boundary_ = std::move(fn);
  }

private:
  Session(SessionState state, LoopDeps deps, std::shared_ptr<transcript::Transcript> log);

  void set_status(Status to, std::optional<PauseReason> reason = std::nullopt);
  void fail(StepRecord &record, const std::string &cause);
  void pause(PauseReason reason);
  std::vector<exec::CommandRequest> command_requests(const parser::ParsedResponse &parsed, std::size_t step) const;

  SessionState state_;
  LoopDeps deps_;
  std::shared_ptr<transcript::Transcript> transcript_;
  Message system_;
  std::vector<Message> history_;
  std::atomic<bool> stop_requested_{false};
  std::function<void(Status, Status)> on_transition_;
  std::function<void(const SessionState &, const StepRecord &)> on_step_boundary_;
};

inline constexpr const char *kTranscriptFile = "transcript.jsonl";

nlohmann::json to_json(const exec::ExecutionRecord &record);
nlohmann::json to_json(const parser::ParsedResponse &parsed);
nlohmann::json to_json(const snippets::StagedSnippet &snippet);
nlohmann::json to_json(const SessionState &state);

} // namespace forgeloop::loop
