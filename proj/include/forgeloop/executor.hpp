#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <regex>
#include <stdexcept>
#include <string>
#include <vector>

namespace forgeloop::exec {

struct CommandRequest {
  std::string command;
  std::string shell_tag;
  std::filesystem::path working_dir;
  std::size_t step = 0;
  std::size_t ordinal = 0;

  // "<step>-<ordinal>", unique within a session.
  std::string exec_id() const;
};

enum class VerdictKind { Ran, Denied, NeedsApprovalTimedOut, TimedOut, SpawnFailed };

struct Verdict {
  VerdictKind kind = VerdictKind::Ran;
  std::string rule_id; // set for Denied

  bool operator==(const Verdict &) const = default;
};

std::string_view to_string(VerdictKind kind);
std::optional<VerdictKind> verdict_from_string(std::string_view name);

struct ExecutionRecord {
  CommandRequest request;
  Verdict verdict;
  std::optional<int> exit_status;
  std::string stdout_text;
  std::string stderr_text;
  std::int64_t duration_ms = 0;
  bool stdout_truncated = false;
  bool stderr_truncated = false;
  // Steady-clock milliseconds; used for ordering checks only.
  std::int64_t started_ms = 0;
  std::int64_t finished_ms = 0;
};

enum class PolicyMode { AutoRun, ApproveAll, RulesOnly };

std::string_view to_string(PolicyMode mode);
std::optional<PolicyMode> policy_mode_from_string(std::string_view name);

class MalformedRule : public std::runtime_error {
public:
  explicit MalformedRule(const std::string &pattern, const std::string &cause = "invalid pattern");
  const std::string &pattern() const noexcept { return pattern_; }

private:
  std::string pattern_;
};

// A glob ("del*") or, with an "re:" prefix, an ECMAScript regex. Globs must
// match the whole command; regexes match anywhere. Both ignore case.
class Rule {
public:
  explicit Rule(std::string pattern); // throws MalformedRule
  bool matches(std::string_view command) const;
  const std::string &pattern() const noexcept { return pattern_; }

private:
  std::string pattern_;
  std::regex compiled_;
  bool anchored_ = true;
};

struct PolicySettings {
  PolicyMode mode = PolicyMode::AutoRun;
  std::vector<std::string> deny;
  std::vector<std::string> allow;
  std::int64_t timeout_ms = 30'000;
  std::size_t max_output_bytes = 16'384;
  bool confine_working_dir = false;

  bool operator==(const PolicySettings &) const = default;
};

class Policy {
public:
  Policy() = default;
  explicit Policy(PolicySettings settings); // compiles rules, throws MalformedRule

  const PolicySettings &settings() const noexcept { return settings_; }
  const std::vector<Rule> &deny_rules() const noexcept { return deny_; }
  const std::vector<Rule> &allow_rules() const noexcept { return allow_; }

private:
  PolicySettings settings_;
  std::vector<Rule> deny_;
  std::vector<Rule> allow_;
};

struct PolicyDecision {
  enum class Kind { Allow, Deny, NeedsApproval };
  Kind kind = Kind::Allow;
  std::string rule_id; // deny pattern, "default", or "confine_working_dir"

  bool operator==(const PolicyDecision &) const = default;
};

inline constexpr std::string_view kConfinementRule = "confine_working_dir";
inline constexpr std::string_view kOperatorDeniedRule = "operator";

// Deny rules first, then allow rules, then the mode fallback. When confinement is
// enabled and working_dir is given, a cd/pushd target outside working_dir is denied.
PolicyDecision evaluate_policy(std::string_view command, const Policy &policy,
                               const std::filesystem::path &working_dir = {});

enum class ApprovalDecision { Approve, Deny, TimedOut };

class ApprovalOracle {
public:
  virtual ~ApprovalOracle() = default;
  // Called before the request becomes visible to observers, so a frontend can
  // register it ahead of any decision arriving.
  virtual void announce(const CommandRequest &) {}
  virtual ApprovalDecision decide(const CommandRequest &request) = 0;
};

// Answers every request with a fixed decision.
class FixedApproval final : public ApprovalOracle {
public:
  explicit FixedApproval(ApprovalDecision decision) : decision_(decision) {}
  ApprovalDecision decide(const CommandRequest &) override { return decision_; }

private:
  ApprovalDecision decision_;
};

class CallbackApproval final : public ApprovalOracle {
public:
  explicit CallbackApproval(std::function<ApprovalDecision(const CommandRequest &)> fn) : fn_(std::move(fn)) {}
  ApprovalDecision decide(const CommandRequest &request) override { return fn_(request); }

private:
  std::function<ApprovalDecision(const CommandRequest &)> fn_;
};

// Shell tag -> argv prefix; the command string is appended as the last argument.
using ShellMap = std::map<std::string, std::vector<std::string>, std::less<>>;
ShellMap default_shell_map();

struct ExecutorOptions {
  ShellMap shells = default_shell_map();
  std::map<std::string, std::string> extra_env;
  // Removed from the inherited environment of every child.
  std::vector<std::string> withheld_env = {"FORGELOOP_API_KEY"};
  // When set, raw (unsanitized, uncapped up to 4x the cap) streams are written here.
  std::optional<std::filesystem::path> raw_capture_dir;
};

struct ExecutionObserver {
  // Called once the verdict is known and before any process is spawned.
  std::function<void(const CommandRequest &, bool will_run)> on_started;
  std::function<void(const ExecutionRecord &)> on_finished;
};

class Executor {
public:
  explicit Executor(ExecutorOptions options = {});

  ExecutionRecord execute(const CommandRequest &request, const Policy &policy, ApprovalOracle &approval,
                          const ExecutionObserver &observer = {});

  // Strictly sequential; later commands run regardless of earlier outcomes.
  std::vector<ExecutionRecord> execute_all(const std::vector<CommandRequest> &requests, const Policy &policy,
                                           ApprovalOracle &approval, const ExecutionObserver &observer = {});

  // Test hook, invoked immediately before every fork.
  void set_spawn_hook(std::function<void(const CommandRequest &)> hook) { spawn_hook_ = std::move(hook); }

  const ExecutorOptions &options() const noexcept { return options_; }
  void set_extra_env(std::map<std::string, std::string> env) { options_.extra_env = std::move(env); }

private:
  ExecutionRecord run_process(const CommandRequest &request, const Policy &policy);

  ExecutorOptions options_;
  std::function<void(const CommandRequest &)> spawn_hook_;
};

} // namespace forgeloop::exec
