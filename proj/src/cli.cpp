#include "forgeloop/cli.hpp"

#include "forgeloop/console_api.hpp"
#include "forgeloop/loop_controller.hpp"
#include "forgeloop/scenario_harness.hpp"
#include "forgeloop/util.hpp"

#include <CLI11.hpp>

#include <pthread.h>
#include <signal.h>
#include <sys/utsname.h>

#include <iostream>
#include <random>

namespace forgeloop::cli {

namespace fs = std::filesystem;

namespace {

struct Flags {
  std::optional<std::string> config_file;
  std::optional<std::string> endpoint;
  std::optional<std::string> model;
  std::optional<std::size_t> max_steps;
  std::optional<std::string> policy;
  std::optional<std::string> script;
  std::optional<std::string> session_dir;
  std::optional<std::string> scenario;
  std::optional<int> port;
  std::optional<std::string> raw_capture;
  std::optional<std::string> scenarios_dir;
  std::optional<std::string> bind;
  std::optional<std::string> token;
  std::optional<std::string> static_dir;
  std::optional<std::string> record_to;
  std::vector<std::string> positional;
};

struct Context {
  Flags flags;
  config::RuntimeConfig config;
  Io *io = nullptr;
};

std::string os_name() {
  utsname u{};
  if (uname(&u) == 0) {
    return u.sysname;
  }
  return "Linux";
}

config::RuntimeConfig resolve_config(const Flags &flags, const config::EnvLookup &env) {
  config::ConfigLayer flag_layer;
  if (flags.endpoint) {
    flag_layer["endpoint_url"] = *flags.endpoint;
  }
  if (flags.model) {
    flag_layer["model_id"] = *flags.model;
  }
  if (flags.max_steps) {
    flag_layer["max_steps"] = std::to_string(*flags.max_steps);
  }
  if (flags.policy) {
    flag_layer["policy_file"] = *flags.policy;
  }
  if (flags.port) {
    flag_layer["console_port"] = std::to_string(*flags.port);
  }
  config::ConfigLayer file;
  if (flags.config_file) {
    file = config::load_file_layer(*flags.config_file);
  } else if (auto path = env(config::kConfigEnv); path && !path->empty()) {
    file = config::load_file_layer(*path);
  }
  return config::resolve(flag_layer, config::env_layer(env), file);
}

std::unique_ptr<llm::ModelBackend> make_backend(const Context &ctx, const std::optional<fs::path> &script) {
  if (script) {
    return std::make_unique<llm::ScriptedModel>(llm::load_script(*script));
  }
  const auto key = ctx.io->env(llm::kApiKeyEnv);
  if (!key || key->empty()) {
    throw config::ConfigError(std::string("live mode needs ") + llm::kApiKeyEnv + " (or pass --script)");
  }
  llm::LiveOptions options;
  options.base_url = ctx.config.endpoint_url;
  options.api_key = *key;
  return std::make_unique<llm::LiveBackend>(std::move(options));
}

std::vector<std::string> secrets_of(const Context &ctx) {
  if (auto key = ctx.io->env(llm::kApiKeyEnv); key && !key->empty()) {
    return {*key};
  }
  return {};
}

std::optional<fs::path> script_flag(const Context &ctx) {
  if (ctx.flags.script) {
    return fs::path(*ctx.flags.script);
  }
  return std::nullopt;
}

prompts::PromptTemplateSet templates_for(const config::RuntimeConfig &config) {
  return config.templates_dir ? prompts::PromptTemplateSet::load(*config.templates_dir)
                              : prompts::PromptTemplateSet::defaults();
}

exec::ExecutorOptions executor_options(const Context &ctx) {
  exec::ExecutorOptions options;
  if (ctx.flags.raw_capture) {
    options.raw_capture_dir = fs::path(*ctx.flags.raw_capture);
  }
  return options;
}

fs::path new_session_dir(const Context &ctx, const std::string &prefix) {
  if (ctx.flags.session_dir) {
    return *ctx.flags.session_dir;
  }
  const auto stamp = util::iso8601_utc(util::wall_clock_ms());
  std::string compact;
  for (char c : stamp.substr(0, 19)) {
    if (std::isdigit(static_cast<unsigned char>(c))) {
      compact.push_back(c);
    }
  }
  std::random_device rd;
  char suffix[8];
  std::snprintf(suffix, sizeof suffix, "%04x", rd() & 0xffffu);
  return ctx.config.session_root / (prefix + "-" + compact + "-" + suffix);
}

// Prompts on the terminal for each approval; end of input denies.
class TerminalApproval final : public exec::ApprovalOracle {
public:
  explicit TerminalApproval(Io &io) : io_(io) {}
  exec::ApprovalDecision decide(const exec::CommandRequest &request) override {
    io_.out << "approve [" << request.shell_tag << "] " << request.command << " ? [y/N] " << std::flush;
    std::string line;
    if (!std::getline(io_.in, line)) {
      return exec::ApprovalDecision::Deny;
    }
    const auto answer = util::to_lower(util::trim(line));
    return answer == "y" || answer == "yes" ? exec::ApprovalDecision::Approve : exec::ApprovalDecision::Deny;
  }

private:
  Io &io_;
};

void print_step(std::ostream &out, const loop::StepRecord &record, bool show_text) {
  out << "[step " << record.step_index << "]";
  if (!record.response) {
    out << " no response\n";
    return;
  }
  std::size_t code = 0, commands = 0;
  for (const auto &b : record.parsed.blocks) {
    code += b.cls.kind == parser::BlockKind::ProgramCode;
    commands += b.cls.kind == parser::BlockKind::ShellCommand;
  }
  out << " " << record.parsed.blocks.size() << " block(s): " << code << " code, " << commands << " command\n";
  if (show_text) {
    std::istringstream lines(record.response->text);
    std::string line;
    while (std::getline(lines, line)) {
      out << "  | " << line << "\n";
    }
  }
  for (const auto &s : record.staged) {
    out << "  staged " << s.latest_path.generic_string() << " (" << s.archive_path.generic_string() << ")\n";
  }
  for (const auto &e : record.executions) {
    out << "  $ " << e.request.command << "  -> " << prompts::status_line(e) << "\n";
  }
}

void print_state(std::ostream &out, const SessionState &state) {
  switch (state.status) {
  case Status::AwaitingHuman:
    out << "[paused] " << (state.pause_reason ? to_string(*state.pause_reason) : "") << "\n";
    break;
  case Status::Failed:
    out << "[failed] " << state.failure_cause << "\n";
    break;
  default:
    out << "[" << to_string(state.status) << "]\n";
    break;
  }
}

struct HostedSession {
  std::unique_ptr<llm::ModelBackend> backend;
  std::unique_ptr<llm::RecordingBackend> recorder;
  std::unique_ptr<exec::Executor> executor;
  std::unique_ptr<exec::ApprovalOracle> approval;
  std::unique_ptr<loop::Session> session;
};

HostedSession host_session(const Context &ctx, const std::string &prefix, bool interactive, bool record) {
  HostedSession h;
  h.backend = make_backend(ctx, script_flag(ctx));
  if (record) {
    h.recorder = std::make_unique<llm::RecordingBackend>(*h.backend);
  }
  h.executor = std::make_unique<exec::Executor>(executor_options(ctx));
  if (interactive) {
    h.approval = std::make_unique<TerminalApproval>(*ctx.io);
  }
  loop::LoopDeps deps;
  deps.model = h.recorder ? static_cast<llm::ModelBackend *>(h.recorder.get()) : h.backend.get();
  deps.executor = h.executor.get();
  deps.approval = h.approval.get();
  deps.policy = exec::Policy(ctx.config.policy);
  deps.templates = templates_for(ctx.config);
  deps.env_facts = {{"os", os_name()}};
  deps.history_window = ctx.config.history_window;
  deps.model_id = ctx.config.model_id;
  deps.secrets = secrets_of(ctx);

  loop::SessionOptions options;
  options.session_dir = new_session_dir(ctx, prefix);
  options.session_id = options.session_dir.filename().string();
  options.max_steps = ctx.config.max_steps;
  h.session = loop::Session::create(options, std::move(deps));
  return h;
}

void stream_steps(loop::Session &session, std::ostream &out, bool show_text) {
  session.on_step_boundary([&out, show_text](const SessionState &, const loop::StepRecord &record) {
    print_step(out, record, show_text);
  });
}

int cmd_run(Context &ctx) {
  auto &io = *ctx.io;
  std::string task;
  for (const auto &p : ctx.flags.positional) {
    task += (task.empty() ? "" : " ") + p;
  }
  if (util::is_blank(task)) {
    io.err << "run: a task is required\n";
    return kUsageError;
  }
  auto h = host_session(ctx, "run", false, false);
  io.out << "session " << h.session->state().session_dir.string() << "\n";
  stream_steps(*h.session, io.out, false);
  h.session->submit_task(task);
  const auto records = h.session->run_until_pause();
  if (!records.empty() && records.back().outcome.kind == loop::StepOutcome::Kind::Failed) {
    print_step(io.out, records.back(), false);
  }
  const auto &state = h.session->state();
  print_state(io.out, state);
  if (state.status == Status::Failed) {
    return kFailed;
  }
  if (state.pause_reason == PauseReason::MaxStepsReached) {
    return kMaxStepsReached;
  }
  return kOk;
}

int cmd_repl(Context &ctx, bool record) {
  auto &io = *ctx.io;
  auto h = host_session(ctx, record ? "record" : "repl", true, record);
  const auto session_dir = h.session->state().session_dir;
  fs::path record_to = ctx.flags.record_to ? fs::path(*ctx.flags.record_to) : session_dir / "recorded_script.yaml";
  io.out << "session " << session_dir.string() << "\n"
         << "Enter a task. End of input quits.\n";
  stream_steps(*h.session, io.out, true);
  for (;;) {
    const auto &state = h.session->state();
    io.out << (state.status == Status::AwaitingTask ? "task> " : "you> ") << std::flush;
    std::string line;
    if (!std::getline(io.in, line)) {
      io.out << "\n";
      break;
    }
    if (util::is_blank(line)) {
      continue;
    }
    h.session->submit_task(line);
    const auto records = h.session->run_until_pause();
    if (!records.empty() && records.back().outcome.kind == loop::StepOutcome::Kind::Failed) {
      print_step(io.out, records.back(), true);
    }
    print_state(io.out, h.session->state());
    if (h.recorder) {
      util::write_file_atomic(record_to, llm::dump_script(h.recorder->recorded()));
    }
  }
  h.session->close();
  if (h.recorder) {
    util::write_file_atomic(record_to, llm::dump_script(h.recorder->recorded()));
    io.out << "recorded " << h.recorder->recorded().size() << " response(s) to " << record_to.string() << "\n";
  }
  return kOk;
}

void wait_for_signal(const std::string &) {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  int sig = 0;
  sigwait(&set, &sig);
}

int cmd_serve(Context &ctx) {
  auto &io = *ctx.io;
  console::ConsoleOptions options;
  options.port = ctx.config.console_port;
  if (ctx.flags.bind) {
    options.bind_address = *ctx.flags.bind;
  }
  options.bearer_token = ctx.flags.token;
  if (ctx.flags.static_dir) {
    options.static_dir = fs::path(*ctx.flags.static_dir);
  }
  options.session_root = ctx.flags.session_dir ? fs::path(*ctx.flags.session_dir) : ctx.config.session_root;
  options.runtime = ctx.config;
  options.templates = templates_for(ctx.config);
  options.env_facts = {{"os", os_name()}};
  options.executor = executor_options(ctx);
  options.secrets = secrets_of(ctx);
  const auto default_script = script_flag(ctx);
  options.backend_factory = [&ctx, default_script](const console::SessionOverrides &o) {
    return make_backend(ctx, o.script ? o.script : default_script);
  };

  // SIGINT/SIGTERM are taken synchronously by the waiting thread.
  const bool use_signals = !io.serve_wait;
  if (use_signals) {
    sigset_t set;
    sigemptyset(&set);
    sigaddset(&set, SIGINT);
    sigaddset(&set, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &set, nullptr);
  }
  console::ConsoleServer server(options);
  try {
    server.start();
  } catch (const console::PortInUse &e) {
    io.err << "serve: " << e.what() << "\n";
    return kFailed;
  } catch (const std::invalid_argument &e) {
    io.err << "serve: " << e.what() << "\n";
    return kUsageError;
  }
  io.out << "console listening on " << server.url() << std::endl;
  if (use_signals) {
    wait_for_signal(server.url());
  } else {
    io.serve_wait(server.url());
  }
  server.stop();
  io.out << "console stopped" << std::endl;
  return kOk;
}

int cmd_replay(Context &ctx) {
  auto &io = *ctx.io;
  const fs::path scenarios_dir =
      ctx.flags.scenarios_dir ? fs::path(*ctx.flags.scenarios_dir) : fs::path(default_scenarios_dir(io.env));
  try {
    if (ctx.flags.scenario) {
      const auto scenario = scenario::find_scenario(scenarios_dir, *ctx.flags.scenario);
      scenario::RunOptions options;
      if (ctx.flags.session_dir) {
        options.session_dir = fs::path(*ctx.flags.session_dir);
      }
      const auto report = scenario::run_scenario(scenario, options);
      for (const auto &a : report.assertions) {
        io.out << (a.passed ? "PASS " : "FAIL ") << a.description;
        if (!a.detail.empty()) {
          io.out << "  [" << a.detail << "]";
        }
        io.out << "\n";
      }
      io.out << "scenario " << report.name << ": " << (report.passed() ? "passed" : "FAILED") << " in "
             << report.elapsed_ms << " ms, transcript hash " << report.transcript_hash << "\n";
      return report.passed() ? kOk : kAssertionFailed;
    }
    if (ctx.flags.positional.size() != 1) {
      io.err << "replay: give --scenario <name> or one transcript path\n";
      return kFailed;
    }
    const auto report = scenario::replay_transcript(ctx.flags.positional[0], scenarios_dir);
    io.out << "recorded hash " << report.recorded_hash << "\n"
           << "replayed hash " << report.replayed_hash << "\n"
           << (report.matched() ? "replay matches" : "replay DIVERGED") << "\n";
    return report.matched() ? kOk : kAssertionFailed;
  } catch (const scenario::ScenarioInfrastructureError &e) {
    io.err << "replay: " << e.what() << "\n";
    return kFailed;
  } catch (const scenario::ScenarioParseError &e) {
    io.err << "replay: " << e.what() << "\n";
    return kFailed;
  }
}

} // namespace

std::string default_scenarios_dir(const config::EnvLookup &env) {
  if (auto dir = env("FORGELOOP_SCENARIOS"); dir && !dir->empty()) {
    return *dir;
  }
  if (fs::is_directory("scenarios")) {
    return "scenarios";
  }
#ifdef FORGELOOP_SOURCE_SCENARIOS
  return FORGELOOP_SOURCE_SCENARIOS;
#else
  return "scenarios";
#endif
}

int main_entry(const std::vector<std::string> &args, Io &io) {
  Context ctx;
  ctx.io = &io;
  auto &f = ctx.flags;

  CLI::App app{"forgeloop: a model-driven agent loop that writes, stages and runs its own tools"};
  app.name("forgeloop");
  app.require_subcommand(1);
  app.add_option("--config", f.config_file, "Config file (default: $FORGELOOP_CONFIG)");
  app.add_option("--endpoint", f.endpoint, "Chat completions base URL");
  app.add_option("--model", f.model, "Model id");
  app.add_option("--max-steps", f.max_steps, "Steps per turn before pausing");
  app.add_option("--policy", f.policy, "Command policy file");
  app.add_option("--script", f.script, "Scripted model responses instead of the live endpoint");
  app.add_option("--session-dir", f.session_dir, "Session directory (serve: session root)");
  app.add_option("--scenario", f.scenario, "Scenario name for replay");
  app.add_option("--port", f.port, "Console port");
  app.add_option("--raw-capture", f.raw_capture, "Directory for raw command output");
  app.add_option("--scenarios-dir", f.scenarios_dir, "Directory holding scenario files");

  auto *repl = app.add_subcommand("repl", "Interactive session in the terminal")->fallthrough();
  auto *run = app.add_subcommand("run", "Run one task until the first pause")->fallthrough();
  run->add_option("task", f.positional, "Task text");
  auto *serve = app.add_subcommand("serve", "Serve the operator console API")->fallthrough();
  serve->add_option("--bind", f.bind, "Bind address (non-loopback needs --token)");
  serve->add_option("--token", f.token, "Bearer token required on every request");
  serve->add_option("--static-dir", f.static_dir, "Serve console assets from this directory");
  auto *replay = app.add_subcommand("replay", "Replay a scenario or a recorded transcript")->fallthrough();
  replay->add_option("transcript", f.positional, "Transcript path");
  auto *record = app.add_subcommand("record", "Interactive session that saves model responses as a script")
                     ->fallthrough();
  record->add_option("--out", f.record_to, "Script file to write (default: <session>/recorded_script.yaml)");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  if (!reversed.empty()) {
    reversed.pop_back();
  }
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp &) {
    io.out << app.help();
    return kOk;
  } catch (const CLI::ParseError &e) {
    io.err << e.what() << "\n" << app.help();
    return kUsageError;
  }

  try {
    ctx.config = resolve_config(f, io.env);
    if (*replay) {
      return cmd_replay(ctx);
    }
    if (*run) {
      return cmd_run(ctx);
    }
    if (*repl) {
      return cmd_repl(ctx, false);
    }
    if (*record) {
      return cmd_repl(ctx, true);
    }
    if (*serve) {
      return cmd_serve(ctx);
    }
  } catch (const config::ConfigError &e) {
    io.err << "config: " << e.what() << "\n";
    return kUsageError;
  } catch (const llm::ScriptParseError &e) {
    io.err << "script: " << e.what() << "\n";
    return kUsageError;
  } catch (const std::exception &e) {
    io.err << "error: " << e.what() << "\n";
    return kFailed;
  }
  return kUsageError;
}

} // namespace forgeloop::cli
