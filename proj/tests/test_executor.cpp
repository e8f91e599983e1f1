#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "forgeloop/executor.hpp"
#include "support.hpp"

using namespace forgeloop::exec;
namespace t = forgeloop::testing;

namespace {

CommandRequest req(std::string command, const std::filesystem::path &dir, std::size_t ordinal = 0,
                   std::string shell = "bash") {
  CommandRequest r;
  r.command = std::move(command);
  r.shell_tag = std::move(shell);
  r.working_dir = dir;
  r.ordinal = ordinal;
  return r;
}

Policy policy_with(PolicySettings s) { return Policy(std::move(s)); }

FixedApproval approve{ApprovalDecision::Approve};

} // namespace

TEST_CASE("evaluate_policy: documented examples") {
  CHECK(evaluate_policy("echo hi", Policy{}).kind == PolicyDecision::Kind::Allow);

  PolicySettings deny;
  deny.deny = {"del*"};
  CHECK(evaluate_policy("del /s *", policy_with(deny)) == PolicyDecision{PolicyDecision::Kind::Deny, "del*"});

  PolicySettings approve_all;
  approve_all.mode = PolicyMode::ApproveAll;
  CHECK(evaluate_policy("curl example.com", policy_with(approve_all)).kind == PolicyDecision::Kind::NeedsApproval);
}

TEST_CASE("evaluate_policy: precedence and fallbacks") {
  PolicySettings s;
  s.mode = PolicyMode::RulesOnly;
  s.deny = {"rm *", "re:\\bsudo\\b"};
  s.allow = {"rm -i *", "echo *", "python3 *"};
  const Policy p(s);
  // Deny wins over a matching allow.
  CHECK(evaluate_policy("rm -i a.txt", p) == PolicyDecision{PolicyDecision::Kind::Deny, "rm *"});
  CHECK(evaluate_policy("echo hi", p) == PolicyDecision{PolicyDecision::Kind::Allow, "echo *"});
  CHECK(evaluate_policy("ls", p) == PolicyDecision{PolicyDecision::Kind::Deny, "default"});
  // Regex rules search anywhere; globs must match whole and ignore case.
  CHECK(evaluate_policy("echo x && SUDO reboot", p).kind == PolicyDecision::Kind::Deny);
  CHECK(evaluate_policy("ECHO loud", p).kind == PolicyDecision::Kind::Allow);
  CHECK(evaluate_policy("pseudo", p).kind == PolicyDecision::Kind::Deny); // default, not sudo
  CHECK(evaluate_policy("pseudo", p).rule_id == "default");

  s.mode = PolicyMode::AutoRun;
  s.allow.clear();
  CHECK(evaluate_policy("ls", Policy(s)).kind == PolicyDecision::Kind::Allow);
}

TEST_CASE("malformed rules fail at load time") {
  PolicySettings s;
  s.deny = {"re:([unclosed"};
  CHECK_THROWS_AS(Policy{s}, MalformedRule);
  s.deny = {"abc[def"};
  CHECK_THROWS_AS(Policy{s}, MalformedRule);
  s.deny = {""};
  CHECK_THROWS_AS(Policy{s}, MalformedRule);
  try {
    s.deny = {"re:(("};
    Policy p(s);
    FAIL("expected MalformedRule");
  } catch (const MalformedRule &e) {
    CHECK(e.pattern() == "re:((");
  }
}

TEST_CASE("working directory confinement") {
  PolicySettings s;
  s.confine_working_dir = true;
  const Policy p(s);
  const std::filesystem::path root = "/work/session";
  CHECK(evaluate_policy("cd sub && ls", p, root).kind == PolicyDecision::Kind::Allow);
  CHECK(evaluate_policy("cd ..", p, root) == PolicyDecision{PolicyDecision::Kind::Deny, "confine_working_dir"});
  CHECK(evaluate_policy("cd /etc", p, root).kind == PolicyDecision::Kind::Deny);
  CHECK(evaluate_policy("ls; cd ~", p, root).kind == PolicyDecision::Kind::Deny);
  CHECK(evaluate_policy("pushd sub/../../x", p, root).kind == PolicyDecision::Kind::Deny);
  CHECK(evaluate_policy("cd /work/session/a", p, root).kind == PolicyDecision::Kind::Allow);
  CHECK(evaluate_policy("cd ..", p).kind == PolicyDecision::Kind::Allow); // no working dir known
  s.confine_working_dir = false;
  CHECK(evaluate_policy("cd ..", Policy(s), root).kind == PolicyDecision::Kind::Allow);
}

TEST_CASE("execute: echo") {
  t::TempDir dir;
  Executor ex;
  const auto r = ex.execute(req("echo hello", dir.path()), Policy{}, approve);
  CHECK(r.verdict.kind == VerdictKind::Ran);
  CHECK(r.exit_status == 0);
  CHECK(r.stdout_text == "hello\n");
  CHECK(r.stderr_text.empty());
}

TEST_CASE("execute: newlines are normalized and invalid UTF-8 sanitized") {
  t::TempDir dir;
  Executor ex;
  const auto r = ex.execute(req("printf 'a\\r\\nb\\rc\\n\\377\\n'", dir.path()), Policy{}, approve);
  CHECK(r.stdout_text == "a\nb\nc\n?\n");
}

TEST_CASE("execute: runs in the working directory with extra env") {
  t::TempDir dir;
  ExecutorOptions opts;
  opts.extra_env = {{"FORGELOOP_TEST_VAR", "value-42"}};
  Executor ex(opts);
  const auto r = ex.execute(req("pwd; echo $FORGELOOP_TEST_VAR", dir.path()), Policy{}, approve);
  CHECK(r.stdout_text == std::filesystem::canonical(dir.path()).string() + "\nvalue-42\n");
}

TEST_CASE("denied commands spawn nothing") {
  t::TempDir dir;
  PolicySettings s;
  s.deny = {"rm *", "re:curl"};
  const Policy p(s);
  Executor ex;
  int spawns = 0;
  ex.set_spawn_hook([&](const CommandRequest &) { ++spawns; });
  const std::vector<std::string> denied = {"rm -rf /", "curl http://x", "echo x | curl -d @- y", "rm a"};
  for (const auto &c : denied) {
    const auto r = ex.execute(req(c, dir.path()), p, approve);
    CHECK(r.verdict.kind == VerdictKind::Denied);
    CHECK(r.stdout_text.empty());
    CHECK(r.stderr_text.empty());
    CHECK_FALSE(r.exit_status.has_value());
    CHECK(r.duration_ms == 0);
  }
  CHECK(spawns == 0);

  // Operator refusal and approval timeout spawn nothing either.
  PolicySettings ask;
  ask.mode = PolicyMode::ApproveAll;
  FixedApproval no(ApprovalDecision::Deny);
  FixedApproval late(ApprovalDecision::TimedOut);
  const auto refused = ex.execute(req("echo a", dir.path()), Policy(ask), no);
  CHECK(refused.verdict == Verdict{VerdictKind::Denied, "operator"});
  CHECK(ex.execute(req("echo a", dir.path()), Policy(ask), late).verdict.kind == VerdictKind::NeedsApprovalTimedOut);
  CHECK(spawns == 0);

  CHECK(ex.execute(req("echo a", dir.path()), Policy(ask), approve).verdict.kind == VerdictKind::Ran);
  CHECK(spawns == 1);
}

TEST_CASE("observer sees will_run before the process and the finished record after") {
  t::TempDir dir;
  PolicySettings s;
  s.deny = {"bad*"};
  Executor ex;
  std::vector<std::string> log;
  ex.set_spawn_hook([&](const CommandRequest &r) { log.push_back("spawn " + r.command); });
  ExecutionObserver obs;
  obs.on_started = [&](const CommandRequest &r, bool will_run) {
    log.push_back(std::string(will_run ? "start " : "skip ") + r.command);
  };
  obs.on_finished = [&](const ExecutionRecord &r) { log.push_back("done " + r.request.command); };
  ex.execute_all({req("bad", dir.path(), 0), req("true", dir.path(), 1)}, Policy(s), approve, obs);
  CHECK(log == std::vector<std::string>{"skip bad", "done bad", "start true", "spawn true", "done true"});
}

TEST_CASE("timeout kills the process tree") {
  t::TempDir dir;
  PolicySettings s;
  s.timeout_ms = 1000;
  Executor ex;
  const auto r = ex.execute(req("sleep 5 & sleep 5; echo never", dir.path()), Policy(s), approve);
  CHECK(r.verdict.kind == VerdictKind::TimedOut);
  CHECK(r.duration_ms >= 1000);
  CHECK(r.duration_ms <= 1500);
  CHECK(r.stdout_text.find("never") == std::string::npos);
  // The executor is still usable.
  CHECK(ex.execute(req("echo after", dir.path()), Policy(s), approve).stdout_text == "after\n");
}

TEST_CASE("output caps with truncation flags") {
  t::TempDir dir;
  PolicySettings s;
  s.max_output_bytes = 1000;
  Executor ex;
  SUBCASE("10x the cap on both streams") {
    const auto r = ex.execute(req("head -c 10000 /dev/zero | tr '\\0' a; head -c 10000 /dev/zero | tr '\\0' b >&2",
                                  dir.path()),
                              Policy(s), approve);
    CHECK(r.verdict.kind == VerdictKind::Ran);
    CHECK(r.stdout_text.size() <= 1000);
    CHECK(r.stderr_text.size() <= 1000);
    CHECK(r.stdout_truncated);
    CHECK(r.stderr_truncated);
  }
  SUBCASE("exactly at the cap is not truncated") {
    const auto r = ex.execute(req("head -c 1000 /dev/zero | tr '\\0' a", dir.path()), Policy(s), approve);
    CHECK(r.stdout_text.size() == 1000);
    CHECK_FALSE(r.stdout_truncated);
  }
  SUBCASE("one over") {
    const auto r = ex.execute(req("head -c 1001 /dev/zero | tr '\\0' a", dir.path()), Policy(s), approve);
    CHECK(r.stdout_text.size() <= 1000);
    CHECK(r.stdout_truncated);
  }
}

TEST_CASE("execute_all: documented examples and sequentiality") {
  t::TempDir dir;
  Executor ex;
  const auto ab = ex.execute_all({req("echo a", dir.path(), 0), req("echo b", dir.path(), 1)}, Policy{}, approve);
  REQUIRE(ab.size() == 2);
  CHECK(ab[0].stdout_text == "a\n");
  CHECK(ab[1].stdout_text == "b\n");

  const auto bad = ex.execute_all({req("bad_command_xyz", dir.path(), 0), req("echo ok", dir.path(), 1)}, Policy{},
                                  approve);
  REQUIRE(bad.size() == 2);
  CHECK(bad[0].exit_status != 0);
  CHECK(bad[1].verdict.kind == VerdictKind::Ran);
  CHECK(bad[1].stdout_text == "ok\n");

  CHECK(ex.execute_all({}, Policy{}, approve).empty());

  std::vector<CommandRequest> many;
  for (std::size_t i = 0; i < 8; ++i) {
    many.push_back(req("sleep 0.0" + std::to_string(i) + "; echo " + std::to_string(i) + " >> order.txt", dir.path(), i));
  }
  const auto records = ex.execute_all(many, Policy{}, approve);
  for (std::size_t i = 1; i < records.size(); ++i) {
    CHECK(records[i - 1].started_ms <= records[i].started_ms);
    CHECK(records[i - 1].finished_ms <= records[i].started_ms);
  }
  CHECK(t::slurp(dir / "order.txt") == "0\n1\n2\n3\n4\n5\n6\n7\n");
}

TEST_CASE("crash containment") {
  t::TempDir dir;
  PolicySettings s;
  s.timeout_ms = 500;
  s.max_output_bytes = 4096;
  Executor ex;
  const std::vector<std::string> hostile = {
      "kill -9 $$",
      "head -c 1000000 /dev/urandom",
      "sleep 10",
      "exit 42",
      "cat /nonexistent",
      "(sleep 3; echo late) &",
      "exec 1>&-; echo closed",
  };
  for (const auto &c : hostile) {
    CAPTURE(c);
    const auto r = ex.execute(req(c, dir.path()), Policy(s), approve);
    CHECK(r.stdout_text.size() <= 4096);
    const auto next = ex.execute(req("echo alive", dir.path()), Policy(s), approve);
    CHECK(next.stdout_text == "alive\n");
  }
  CHECK(ex.execute(req("exit 42", dir.path()), Policy(s), approve).exit_status == 42);
  CHECK(ex.execute(req("kill -9 $$", dir.path()), Policy(s), approve).exit_status == 137);
}

TEST_CASE("spawn failures are records, not crashes") {
  t::TempDir dir;
  ExecutorOptions opts;
  opts.shells["ghost"] = {"/nonexistent/shell", "-c"};
  Executor ex(opts);
  const auto missing = ex.execute(req("echo hi", dir.path(), 0, "ghost"), Policy{}, approve);
  CHECK(missing.verdict.kind == VerdictKind::SpawnFailed);
  CHECK_FALSE(missing.exit_status.has_value());
  CHECK(ex.execute(req("echo hi", dir.path(), 0, "no-such-tag"), Policy{}, approve).verdict.kind ==
        VerdictKind::SpawnFailed);
  const auto bad_dir = ex.execute(req("echo hi", dir / "missing"), Policy{}, approve);
  CHECK(bad_dir.verdict.kind == VerdictKind::SpawnFailed);
  CHECK(ex.execute(req("echo hi", dir.path()), Policy{}, approve).stdout_text == "hi\n");
}

TEST_CASE("raw capture keeps unnormalized bytes") {
  t::TempDir dir;
  ExecutorOptions opts;
  opts.raw_capture_dir = dir / "raw";
  Executor ex(opts);
  auto r = req("printf 'x\\r\\n'", dir.path(), 2);
  r.step = 4;
  const auto rec = ex.execute(r, Policy{}, approve);
  CHECK(rec.stdout_text == "x\n");
  CHECK(t::slurp(dir / "raw/step4_cmd2.stdout") == "x\r\n");
}

TEST_CASE("verdict and mode names round-trip") {
  for (auto k : {VerdictKind::Ran, VerdictKind::Denied, VerdictKind::NeedsApprovalTimedOut, VerdictKind::TimedOut,
                 VerdictKind::SpawnFailed}) {
    CHECK(verdict_from_string(to_string(k)) == k);
  }
  for (auto m : {PolicyMode::AutoRun, PolicyMode::ApproveAll, PolicyMode::RulesOnly}) {
    CHECK(policy_mode_from_string(to_string(m)) == m);
  }
  CommandRequest r;
  r.step = 3;
  r.ordinal = 1;
  CHECK(r.exec_id() == "3-1");
}
