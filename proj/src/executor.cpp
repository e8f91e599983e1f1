#include "forgeloop/executor.hpp"

#include "forgeloop/util.hpp"

#include <algorithm>
#include <cerrno>
#include <csignal>
#include <cstring>
#include <fcntl.h>
#include <poll.h>
#include <sys/wait.h>
#include <thread>
#include <unistd.h>

extern char **environ;

namespace forgeloop::exec {

namespace fs = std::filesystem;

std::string CommandRequest::exec_id() const { return std::to_string(step) + "-" + std::to_string(ordinal); }

std::string_view to_string(VerdictKind kind) {
  switch (kind) {
  case VerdictKind::Ran:
    return "ran";
  case VerdictKind::Denied:
    return "denied";
  case VerdictKind::NeedsApprovalTimedOut:
    return "needs_approval_timed_out";
  case VerdictKind::TimedOut:
    return "timed_out";
  case VerdictKind::SpawnFailed:
    return "spawn_failed";
  }
  return "ran";
}

std::optional<VerdictKind> verdict_from_string(std::string_view name) {
  for (auto kind : {VerdictKind::Ran, VerdictKind::Denied, VerdictKind::NeedsApprovalTimedOut, VerdictKind::TimedOut,
                    VerdictKind::SpawnFailed}) {
    if (to_string(kind) == name) {
      return kind;
    }
  }
  return std::nullopt;
}

std::string_view to_string(PolicyMode mode) {
  switch (mode) {
  case PolicyMode::AutoRun:
    return "auto_run";
  case PolicyMode::ApproveAll:
    return "approve_all";
  case PolicyMode::RulesOnly:
    return "rules_only";
  }
  return "auto_run";
}

std::optional<PolicyMode> policy_mode_from_string(std::string_view name) {
  for (auto mode : {PolicyMode::AutoRun, PolicyMode::ApproveAll, PolicyMode::RulesOnly}) {
    if (to_string(mode) == name) {
      return mode;
    }
  }
  return std::nullopt;
}

MalformedRule::MalformedRule(const std::string &pattern, const std::string &cause)
    : std::runtime_error("malformed policy rule '" + pattern + "': " + cause), pattern_(pattern) {}

namespace {

std::string glob_to_regex(const std::string &glob) {
  std::string out;
  for (std::size_t i = 0; i < glob.size(); ++i) {
    const char c = glob[i];
    switch (c) {
    case '*':
      out += ".*";
      break;
    case '?':
      out += '.';
      break;
    case '[': {
      const auto close = glob.find(']', i + 2);
      if (close == std::string::npos) {
        throw MalformedRule(glob, "unterminated character class");
      }
      std::string cls = glob.substr(i + 1, close - i - 1);
      if (!cls.empty() && cls.front() == '!') {
        cls.front() = '^';
      }
      out += '[';
      for (char k : cls) {
        if (k == '\\' || k == '[') {
          out += '\\';
        }
        out += k;
      }
      out += ']';
      i = close;
      break;
    }
    default:
      if (std::strchr("\\^$.|+(){}]", c) != nullptr) {
        out += '\\';
      }
      out += c;
    }
  }
  return out;
}

} // namespace

Rule::Rule(std::string pattern) : pattern_(std::move(pattern)) {
  if (pattern_.empty()) {
    throw MalformedRule(pattern_, "empty pattern");
  }
  try {
    constexpr auto flags = std::regex::ECMAScript | std::regex::icase;
    if (pattern_.rfind("re:", 0) == 0) {
      anchored_ = false;
      compiled_ = std::regex(pattern_.substr(3), flags);
    } else {
      compiled_ = std::regex(glob_to_regex(pattern_), flags);
    }
  } catch (const std::regex_error &e) {
    throw MalformedRule(pattern_, e.what());
  }
}

bool Rule::matches(std::string_view command) const {
  const std::string subject(command);
  return anchored_ ? std::regex_match(subject, compiled_) : std::regex_search(subject, compiled_);
}

Policy::Policy(PolicySettings settings) : settings_(std::move(settings)) {
  for (const auto &p : settings_.deny) {
    deny_.emplace_back(p);
  }
  for (const auto &p : settings_.allow) {
    allow_.emplace_back(p);
  }
}

namespace {

bool escapes(const fs::path &root, const std::string &target) {
  if (target.empty() || target == "~" || target.front() == '~' || target == "-") {
    return true;
  }
  const fs::path base = root.lexically_normal();
  fs::path resolved = fs::path(target).is_absolute() ? fs::path(target) : base / target;
  resolved = resolved.lexically_normal();
  const auto rel = resolved.lexically_relative(base);
  if (rel.empty()) {
    return true;
  }
  const auto first = *rel.begin();
  return first == "..";
}

// Looks for cd/pushd/chdir whose target leaves root.
bool leaves_working_dir(std::string_view command, const fs::path &root) {
  std::vector<std::string> tokens;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) {
      tokens.push_back(current);
      current.clear();
    }
  };
  for (char c : command) {
    if (c == ' ' || c == '\t') {
      flush();
    } else if (c == ';' || c == '&' || c == '|') {
      flush();
      tokens.emplace_back(1, c);
    } else if (c != '"' && c != '\'') {
      current.push_back(c);
    }
  }
  flush();
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto word = util::to_lower(tokens[i]);
    if (word != "cd" && word != "pushd" && word != "chdir" && word != "set-location" && word != "cd..") {
      continue;
    }
    if (word == "cd..") {
      return true;
    }
    std::size_t j = i + 1;
    while (j < tokens.size() && (tokens[j] == "/d" || tokens[j] == "/D" || tokens[j] == "--")) {
      ++j;
    }
    const bool has_target = j < tokens.size() && tokens[j] != ";" && tokens[j] != "&" && tokens[j] != "|";
    if (escapes(root, has_target ? tokens[j] : std::string())) {
      return true;
    }
  }
  return false;
}

} // namespace

PolicyDecision evaluate_policy(std::string_view command, const Policy &policy, const fs::path &working_dir) {
  for (const auto &rule : policy.deny_rules()) {
    if (rule.matches(command)) {
      return {PolicyDecision::Kind::Deny, rule.pattern()};
    }
  }
  if (policy.settings().confine_working_dir && !working_dir.empty() && leaves_working_dir(command, working_dir)) {
    return {PolicyDecision::Kind::Deny, std::string(kConfinementRule)};
  }
  for (const auto &rule : policy.allow_rules()) {
    if (rule.matches(command)) {
      return {PolicyDecision::Kind::Allow, rule.pattern()};
    }
  }
  switch (policy.settings().mode) {
  case PolicyMode::AutoRun:
    return {PolicyDecision::Kind::Allow, {}};
  case PolicyMode::ApproveAll:
    return {PolicyDecision::Kind::NeedsApproval, {}};
  case PolicyMode::RulesOnly:
    return {PolicyDecision::Kind::Deny, "default"};
  }
  return {PolicyDecision::Kind::Deny, "default"};
}

ShellMap default_shell_map() {
  return {
      {"bash", {"bash", "-c"}},
      {"sh", {"/bin/sh", "-c"}},
      {"shell", {"/bin/sh", "-c"}},
      {"cmd", {"cmd.exe", "/d", "/s", "/c"}},
      {"powershell", {"pwsh", "-NoProfile", "-NonInteractive", "-Command"}},
  };
}

Executor::Executor(ExecutorOptions options) : options_(std::move(options)) {}

namespace {

ExecutionRecord not_run(const CommandRequest &request, VerdictKind kind, std::string rule_id = {}) {
  ExecutionRecord record;
  record.request = request;
  record.verdict = Verdict{kind, std::move(rule_id)};
  record.started_ms = util::steady_clock_ms();
  record.finished_ms = record.started_ms;
  return record;
}

struct StreamCapture {
  int fd = -1;
  std::string data;
  std::string raw;
  std::size_t total = 0;
  bool open() const { return fd >= 0; }
};

void read_available(StreamCapture &stream, std::size_t cap, std::size_t raw_cap) {
  char buf[65536];
  while (stream.open()) {
    const auto n = ::read(stream.fd, buf, sizeof(buf));
    if (n > 0) {
      const auto count = static_cast<std::size_t>(n);
      stream.total += count;
      if (stream.data.size() < cap) {
        stream.data.append(buf, std::min(count, cap - stream.data.size()));
      }
      if (stream.raw.size() < raw_cap) {
        stream.raw.append(buf, std::min(count, raw_cap - stream.raw.size()));
      }
      continue;
    }
    if (n == 0) {
      ::close(stream.fd);
      stream.fd = -1;
    } else if (errno != EINTR && errno != EAGAIN && errno != EWOULDBLOCK) {
      ::close(stream.fd);
      stream.fd = -1;
    }
    if (n < 0 && errno == EINTR) {
      continue;
    }
    return;
  }
}

void close_fd(int &fd) {
  if (fd >= 0) {
    ::close(fd);
    fd = -1;
  }
}

} // namespace

ExecutionRecord Executor::run_process(const CommandRequest &request, const Policy &policy) {
  ExecutionRecord record;
  record.request = request;
  const auto cap = policy.settings().max_output_bytes;

  const auto shell = options_.shells.find(request.shell_tag);
  if (shell == options_.shells.end() || shell->second.empty()) {
    record = not_run(request, VerdictKind::SpawnFailed);
    record.stderr_text = "no shell configured for tag '" + request.shell_tag + "'";
    return record;
  }

  // Everything the child needs is built before fork.
  std::vector<std::string> args = shell->second;
  args.push_back(request.command);
  std::vector<char *> argv;
  for (auto &a : args) {
    argv.push_back(a.data());
  }
  argv.push_back(nullptr);

  std::map<std::string, std::string> env_map;
  for (char **e = environ; e != nullptr && *e != nullptr; ++e) {
    std::string entry(*e);
    const auto eq = entry.find('=');
    if (eq != std::string::npos) {
      env_map[entry.substr(0, eq)] = entry.substr(eq + 1);
    }
  }
  for (const auto &name : options_.withheld_env) {
    env_map.erase(name);
  }
  for (const auto &[k, v] : options_.extra_env) {
    env_map[k] = v;
  }
  std::vector<std::string> env_entries;
  for (const auto &[k, v] : env_map) {
    env_entries.push_back(k + "=" + v);
  }
  std::vector<char *> envp;
  for (auto &e : env_entries) {
    envp.push_back(e.data());
  }
  envp.push_back(nullptr);
  const std::string cwd = request.working_dir.string();

  int out_pipe[2] = {-1, -1};
  int err_pipe[2] = {-1, -1};
  int exec_fail[2] = {-1, -1};
  if (::pipe2(out_pipe, O_CLOEXEC) != 0 || ::pipe2(err_pipe, O_CLOEXEC) != 0 || ::pipe2(exec_fail, O_CLOEXEC) != 0) {
    for (int *p : {out_pipe, err_pipe, exec_fail}) {
      close_fd(p[0]);
      close_fd(p[1]);
    }
    record = not_run(request, VerdictKind::SpawnFailed);
    record.stderr_text = std::string("pipe: ") + std::strerror(errno);
    return record;
  }

  if (spawn_hook_) {
    spawn_hook_(request);
  }
  record.started_ms = util::steady_clock_ms();
  const pid_t pid = ::fork();
  if (pid < 0) {
    for (int *p : {out_pipe, err_pipe, exec_fail}) {
      close_fd(p[0]);
      close_fd(p[1]);
    }
    record = not_run(request, VerdictKind::SpawnFailed);
    record.stderr_text = std::string("fork: ") + std::strerror(errno);
    return record;
  }
  if (pid == 0) {
    ::setpgid(0, 0);
    const int devnull = ::open("/dev/null", O_RDONLY);
    if (devnull >= 0) {
      ::dup2(devnull, STDIN_FILENO);
    }
    ::dup2(out_pipe[1], STDOUT_FILENO);
    ::dup2(err_pipe[1], STDERR_FILENO);
    if (!cwd.empty() && ::chdir(cwd.c_str()) != 0) {
      const int err = errno;
      (void)!::write(exec_fail[1], &err, sizeof(err));
      ::_exit(127);
    }
    ::execvpe(argv[0], argv.data(), envp.data());
    const int err = errno;
    (void)!::write(exec_fail[1], &err, sizeof(err));
    ::_exit(127);
  }
  ::setpgid(pid, pid);
  close_fd(out_pipe[1]);
  close_fd(err_pipe[1]);
  close_fd(exec_fail[1]);

  int child_errno = 0;
  const bool exec_failed = ::read(exec_fail[0], &child_errno, sizeof(child_errno)) == sizeof(child_errno);
  close_fd(exec_fail[0]);

  StreamCapture out{out_pipe[0]};
  StreamCapture err{err_pipe[0]};
  ::fcntl(out.fd, F_SETFL, O_NONBLOCK);
  ::fcntl(err.fd, F_SETFL, O_NONBLOCK);
  const std::size_t raw_cap = options_.raw_capture_dir ? cap * 4 : 0;

  const auto timeout = policy.settings().timeout_ms;
  const auto deadline = record.started_ms + timeout;
  constexpr std::int64_t kPipeGraceMs = 250;
  bool exited = false;
  bool timed_out = false;
  std::int64_t exited_at = 0;
  int status = 0;

  while (true) {
    const auto now = util::steady_clock_ms();
    if (!exited && now >= deadline) {
      ::kill(-pid, SIGKILL);
      timed_out = true;
      break;
    }
    if (exited && (!out.open() && !err.open())) {
      break;
    }
    if (exited && (now >= deadline || now - exited_at >= kPipeGraceMs)) {
      // Shell returned but background descendants still hold the pipes.
      ::kill(-pid, SIGKILL);
      break;
    }
    pollfd fds[2];
    nfds_t nfds = 0;
    for (auto *s : {&out, &err}) {
      if (s->open()) {
        fds[nfds++] = pollfd{s->fd, POLLIN, 0};
      }
    }
    const auto wait_ms = static_cast<int>(std::clamp<std::int64_t>(deadline - now, 1, 20));
    if (nfds > 0) {
      ::poll(fds, nfds, wait_ms);
    } else {
      std::this_thread::sleep_for(std::chrono::milliseconds(wait_ms));
    }
    read_available(out, cap, raw_cap);
    read_available(err, cap, raw_cap);
    if (!exited) {
      const auto r = ::waitpid(pid, &status, WNOHANG);
      if (r == pid) {
        exited = true;
        exited_at = util::steady_clock_ms();
      }
    }
  }

  // Drain whatever the killed group left behind, bounded.
  const auto drain_until = util::steady_clock_ms() + 200;
  while ((out.open() || err.open()) && util::steady_clock_ms() < drain_until) {
    read_available(out, cap, raw_cap);
    read_available(err, cap, raw_cap);
    if (out.open() || err.open()) {
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
  }
  close_fd(out.fd);
  close_fd(err.fd);
  if (!exited) {
    ::waitpid(pid, &status, 0);
  }
  record.finished_ms = util::steady_clock_ms();
  record.duration_ms = record.finished_ms - record.started_ms;

  record.stdout_truncated = out.total > cap;
  record.stderr_truncated = err.total > cap;
  record.stdout_text = util::sanitize_utf8(util::normalize_newlines(out.data));
  record.stderr_text = util::sanitize_utf8(util::normalize_newlines(err.data));

  if (options_.raw_capture_dir) {
    std::error_code ec;
    fs::create_directories(*options_.raw_capture_dir, ec);
    const auto stem = *options_.raw_capture_dir / ("step" + std::to_string(request.step) + "_cmd" +
                                                   std::to_string(request.ordinal));
    try {
      util::write_file_atomic(fs::path(stem.string() + ".stdout"), out.raw);
      util::write_file_atomic(fs::path(stem.string() + ".stderr"), err.raw);
    } catch (const StorageFailure &) {
      // raw capture is best-effort diagnostics
    }
  }

  if (exec_failed) {
    record.verdict = Verdict{VerdictKind::SpawnFailed, {}};
    record.stderr_text = std::string("spawn failed: ") + args.front() + ": " + std::strerror(child_errno);
    record.exit_status.reset();
    return record;
  }
  if (timed_out) {
    record.verdict = Verdict{VerdictKind::TimedOut, {}};
    return record;
  }
  record.verdict = Verdict{VerdictKind::Ran, {}};
  if (WIFEXITED(status)) {
    record.exit_status = WEXITSTATUS(status);
  } else if (WIFSIGNALED(status)) {
    record.exit_status = 128 + WTERMSIG(status);
  } else {
    record.exit_status = -1;
  }
  return record;
}

ExecutionRecord Executor::execute(const CommandRequest &request, const Policy &policy, ApprovalOracle &approval,
                                  const ExecutionObserver &observer) {
  auto finish = [&](ExecutionRecord record) {
    if (observer.on_finished) {
      observer.on_finished(record);
    }
    return record;
  };
  auto started = [&](bool will_run) {
    if (observer.on_started) {
      observer.on_started(request, will_run);
    }
  };

  const auto decision = evaluate_policy(request.command, policy, request.working_dir);
  if (decision.kind == PolicyDecision::Kind::Deny) {
    started(false);
    return finish(not_run(request, VerdictKind::Denied, decision.rule_id));
  }
  if (decision.kind == PolicyDecision::Kind::NeedsApproval) {
    switch (approval.decide(request)) {
    case ApprovalDecision::Approve:
      break;
    case ApprovalDecision::Deny:
      started(false);
      return finish(not_run(request, VerdictKind::Denied, std::string(kOperatorDeniedRule)));
    case ApprovalDecision::TimedOut:
      started(false);
      return finish(not_run(request, VerdictKind::NeedsApprovalTimedOut));
    }
  }
  started(true);
  return finish(run_process(request, policy));
}

std::vector<ExecutionRecord> Executor::execute_all(const std::vector<CommandRequest> &requests, const Policy &policy,
                                                   ApprovalOracle &approval, const ExecutionObserver &observer) {
  std::vector<ExecutionRecord> records;
  records.reserve(requests.size());
  for (const auto &request : requests) {
    records.push_back(execute(request, policy, approval, observer));
  }
  return records;
}

} // namespace forgeloop::exec
