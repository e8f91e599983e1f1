#include "forgeloop/loop_controller.hpp"

#include "forgeloop/util.hpp"

namespace forgeloop::loop {

namespace fs = std::filesystem;
using nlohmann::json;
using transcript::EventKind;

json to_json(const exec::ExecutionRecord &record) {
  json j;
  j["exec_id"] = record.request.exec_id();
  j["step"] = record.request.step;
  j["ordinal"] = record.request.ordinal;
  j["command"] = record.request.command;
  j["shell"] = record.request.shell_tag;
  j["verdict"] = exec::to_string(record.verdict.kind);
  if (!record.verdict.rule_id.empty()) {
    j["rule_id"] = record.verdict.rule_id;
  }
  j["exit_status"] = record.exit_status ? json(*record.exit_status) : json(nullptr);
  j["stdout"] = record.stdout_text;
  j["stderr"] = record.stderr_text;
  j["stdout_truncated"] = record.stdout_truncated;
  j["stderr_truncated"] = record.stderr_truncated;
  j["duration_ms"] = record.duration_ms;
  return j;
}

json to_json(const parser::ParsedResponse &parsed) {
  json blocks = json::array();
  for (const auto &b : parsed.blocks) {
    blocks.push_back({
        {"ordinal", b.block.ordinal},
        {"info_tag", b.block.info_tag},
        {"class", parser::to_string(b.cls.kind)},
        {"span", json::array({b.block.span.start, b.block.span.end})},
        {"body", b.block.body},
    });
  }
  return {{"blocks", blocks}, {"human_input_requested", parsed.human_input_requested}, {"terminal", parsed.terminal}};
}

json to_json(const snippets::StagedSnippet &snippet) {
  return {
      {"step", snippet.source_step},
      {"ordinal", snippet.source_ordinal},
      {"language", snippet.language_tag},
      {"latest_path", snippet.latest_path.generic_string()},
      {"archive_path", snippet.archive_path.generic_string()},
      {"content_hash", snippet.content_hash},
  };
}

json to_json(const SessionState &state) {
  json j;
  j["session_id"] = state.session_id;
  j["status"] = to_string(state.status);
  j["pause_reason"] = state.pause_reason ? json(to_string(*state.pause_reason)) : json(nullptr);
  j["failure_cause"] = state.failure_cause;
  j["task"] = state.task ? json(*state.task) : json(nullptr);
  j["step_index"] = state.step_index;
  j["turn_start"] = state.turn_start;
  j["max_steps"] = state.max_steps;
  j["session_dir"] = state.session_dir.string();
  j["scenario"] = state.scenario ? json(*state.scenario) : json(nullptr);
  return j;
}

Session::Session(SessionState state, LoopDeps deps, std::shared_ptr<transcript::Transcript> log)
    : state_(std::move(state)), deps_(std::move(deps)), transcript_(std::move(log)) {
  if (deps_.model == nullptr || deps_.executor == nullptr) {
    throw std::invalid_argument("session needs a model backend and an executor");
  }
  for (const auto &secret : deps_.secrets) {
    transcript_->add_secret(secret);
  }
}

std::unique_ptr<Session> Session::create(SessionOptions options, LoopDeps deps) {
  if (options.max_steps == 0) {
    throw std::invalid_argument("max_steps must be positive");
  }
  std::error_code ec;
  fs::create_directories(options.session_dir, ec);
  if (ec) {
    throw StorageFailure(options.session_dir, ec.message());
  }
  auto log = transcript::Transcript::open(options.session_dir / kTranscriptFile, options.durability);
  if (log->size() != 0) {
    throw InvalidState("session directory already holds a transcript: " + options.session_dir.string());
  }
  SessionState state;
  state.session_id = options.session_id;
  state.session_dir = options.session_dir;
  state.max_steps = options.max_steps;
  state.scenario = options.scenario;

  json payload{{"session_id", state.session_id},
               {"max_steps", state.max_steps},
               {"created_at", util::iso8601_utc(util::wall_clock_ms())}};
  if (state.scenario) {
    payload["scenario"] = *state.scenario;
  }
  log->append(EventKind::SessionCreated, std::move(payload));
  return std::unique_ptr<Session>(new Session(std::move(state), std::move(deps), std::move(log)));
}

std::unique_ptr<Session> Session::restore(const fs::path &session_dir, LoopDeps deps,
                                          transcript::Durability durability) {
  auto log = transcript::Transcript::open(session_dir / kTranscriptFile, durability);
  const auto events = log->snapshot();
  auto state = transcript::reconstruct(events, session_dir);
  std::unique_ptr<Session> session(new Session(std::move(state), std::move(deps), std::move(log)));

  // Replay message history up to the last step boundary.
  std::size_t boundary = 0;
  for (std::size_t i = 0; i < events.size(); ++i) {
    switch (events[i].kind) {
    case EventKind::SessionCreated:
    case EventKind::TaskSubmitted:
    case EventKind::Resumed:
    case EventKind::StepCompleted:
    case EventKind::Paused:
    case EventKind::SessionFailed:
    case EventKind::SessionClosed:
      boundary = i + 1;
      break;
    default:
      break;
    }
  }
  std::optional<std::string> pending_assistant;
  for (std::size_t i = 0; i < boundary; ++i) {
    const auto &p = events[i].payload;
    switch (events[i].kind) {
    case EventKind::TaskSubmitted:
      session->system_ = Message{Role::System, p.value("system", std::string())};
      session->history_ = {Message{Role::User, p.value("task", std::string())}};
      pending_assistant.reset();
      break;
    case EventKind::Resumed:
      session->history_.push_back(Message{Role::User, p.value("text", std::string())});
      break;
    case EventKind::ModelQueried:
      pending_assistant.reset();
      break;
    case EventKind::ModelResponded:
      pending_assistant = p.value("text", std::string());
      break;
    case EventKind::StepCompleted:
    case EventKind::SessionFailed:
      if (pending_assistant) {
        session->history_.push_back(Message{Role::Assistant, *pending_assistant});
        pending_assistant.reset();
      }
      if (p.contains("next_prompt") && p["next_prompt"].is_string()) {
        session->history_.push_back(Message{Role::User, p["next_prompt"].get<std::string>()});
      }
      break;
    default:
      break;
    }
  }
  return session;
}

void Session::set_status(Status to, std::optional<PauseReason> reason) {
  const auto from = state_.status;
  if (!transition_allowed(from, to)) {
    throw InvalidState("illegal transition " + std::string(to_string(from)) + " -> " + std::string(to_string(to)));
  }
  state_.status = to;
  state_.pause_reason = to == Status::AwaitingHuman ? reason : std::nullopt;
  if (to != Status::Failed) {
    state_.failure_cause.clear();
  }
  if (on_transition_) {
    on_transition_(from, to);
  }
}

const SessionState &Session::submit_task(std::string_view text) {
  if (!state_.accepts_input()) {
    throw InvalidState("session cannot take input while " + std::string(to_string(state_.status)));
  }
  if (util::is_blank(text)) {
    throw BlankTask();
  }
  if (state_.status == Status::AwaitingTask) {
    auto messages = prompts::render_initial(text, deps_.templates, deps_.env_facts);
    transcript_->append(EventKind::TaskSubmitted, {{"task", std::string(text)},
                                                   {"step_index", state_.step_index},
                                                   {"system", messages[0].content}});
    system_ = std::move(messages[0]);
    history_ = {std::move(messages[1])};
    state_.task = std::string(text);
  } else {
    auto message = prompts::render_resume(text, deps_.templates);
    transcript_->append(EventKind::Resumed, {{"text", std::string(text)}, {"step_index", state_.step_index}});
    history_.push_back(std::move(message));
  }
  state_.turn_start = state_.step_index;
  set_status(Status::Stepping);
  return state_;
}

std::vector<Message> Session::next_request_messages() const {
  std::vector<Message> messages{system_};
  const auto window = std::min(deps_.history_window == 0 ? history_.size() : deps_.history_window, history_.size());
  messages.insert(messages.end(), history_.end() - static_cast<std::ptrdiff_t>(window), history_.end());
  return messages;
}

void Session::fail(StepRecord &record, const std::string &cause) {
  record.outcome = StepOutcome::failed();
  record.failure = cause;
  try {
    transcript_->append(EventKind::SessionFailed,
                        {{"cause", cause}, {"step", record.step_index}, {"step_index", state_.step_index}});
  } catch (const std::exception &) {
    // the transcript itself is what failed; status still changes
  }
  set_status(Status::Failed);
  state_.failure_cause = cause;
}

void Session::pause(PauseReason reason) {
  transcript_->append(EventKind::Paused, {{"reason", to_string(reason)}, {"step_index", state_.step_index}});
  set_status(Status::AwaitingHuman, reason);
}

std::vector<exec::CommandRequest> Session::command_requests(const parser::ParsedResponse &parsed,
                                                          std::size_t step) const {
  std::vector<exec::CommandRequest> requests;
  for (const auto &b : parsed.blocks) {
    if (b.cls.kind != parser::BlockKind::ShellCommand) {
      continue;
    }
    for (auto &command : parser::split_commands(b.block.body, b.cls.tag)) {
      exec::CommandRequest request;
      request.command = std::move(command);
      request.shell_tag = b.cls.tag;
      request.working_dir = state_.session_dir;
      request.step = step;
      request.ordinal = requests.size();
      requests.push_back(std::move(request));
    }
  }
  return requests;
}

StepRecord Session::step() {
  if (state_.status != Status::Stepping) {
    throw InvalidState("step requires a stepping session");
  }
  if (state_.steps_this_turn() >= state_.max_steps) {
    throw InvalidState("max_steps reached for this turn");
  }
  StepRecord record;
  record.step_index = state_.step_index;

  llm::ModelRequest request;
  request.messages = next_request_messages();
  request.model_id = deps_.model_id;
  request.temperature = deps_.temperature;
  record.prompt_digest = llm::prompt_digest(request.messages);

  try {
    transcript_->append(EventKind::ModelQueried, {{"step", record.step_index},
                                                  {"prompt_digest", record.prompt_digest},
                                                  {"message_count", request.messages.size()},
                                                  {"prompt", request.messages.back().content}});
    try {
      record.response = deps_.model->complete(request);
    } catch (const llm::GatewayError &e) {
      fail(record, std::string(llm::to_string(e.kind())) + ": " + e.what());
      return record;
    } catch (const std::invalid_argument &e) {
      fail(record, std::string("bad_request: ") + e.what());
      return record;
    }
    const auto &response = *record.response;
    json responded{{"step", record.step_index},
                   {"text", response.text},
                   {"finish_reason", llm::to_string(response.finish_reason)},
                   {"source", response.script_position ? "scripted" : "live"},
                   {"latency_ms", response.latency_ms}};
    if (response.script_position) {
      responded["script_position"] = *response.script_position;
    }
    transcript_->append(EventKind::ModelResponded, std::move(responded));
    history_.push_back(Message{Role::Assistant, response.text});
    // A received response consumes the step index even if later stages fail,
    // so archive names are never reused.
    ++state_.step_index;

    record.parsed = parser::parse_response(response.text, deps_.parser);
    auto parsed_json = to_json(record.parsed);
    parsed_json["step"] = record.step_index;
    transcript_->append(EventKind::BlocksParsed, std::move(parsed_json));

    try {
      record.staged = snippets::stage(record.parsed.blocks, state_.session_dir, record.step_index);
    } catch (const StorageFailure &e) {
      fail(record, std::string("storage_failure: ") + e.what());
      return record;
    }
    for (const auto &s : record.staged) {
      transcript_->append(EventKind::SnippetStaged, to_json(s));
    }

    const auto requests = command_requests(record.parsed, record.step_index);
    exec::CallbackApproval approval([this](const exec::CommandRequest &req) {
      if (deps_.approval != nullptr) {
        deps_.approval->announce(req);
      }
      transcript_->append(EventKind::ApprovalRequested, {{"exec_id", req.exec_id()},
                                                         {"step", req.step},
                                                         {"ordinal", req.ordinal},
                                                         {"command", req.command},
                                                         {"shell", req.shell_tag}});
      set_status(Status::AwaitingHuman, PauseReason::ApprovalPending);
      const auto decision =
          deps_.approval != nullptr ? deps_.approval->decide(req) : exec::ApprovalDecision::TimedOut;
      const char *name = decision == exec::ApprovalDecision::Approve ? "approve"
                         : decision == exec::ApprovalDecision::Deny  ? "deny"
                                                                     : "timed_out";
      transcript_->append(EventKind::ApprovalResolved, {{"exec_id", req.exec_id()}, {"decision", name}});
      set_status(Status::Stepping);
      return decision;
    });
    exec::ExecutionObserver observer;
    observer.on_started = [this](const exec::CommandRequest &req, bool will_run) {
      transcript_->append(EventKind::CommandStarted, {{"exec_id", req.exec_id()},
                                                      {"step", req.step},
                                                      {"ordinal", req.ordinal},
                                                      {"command", req.command},
                                                      {"shell", req.shell_tag},
                                                      {"will_run", will_run}});
    };
    observer.on_finished = [this](const exec::ExecutionRecord &r) {
      transcript_->append(EventKind::CommandFinished, to_json(r));
    };
    record.executions = deps_.executor->execute_all(requests, deps_.policy, approval, observer);

    std::optional<Message> next_prompt;
    if (!record.executions.empty()) {
      next_prompt = prompts::render_step(record.executions, deps_.templates);
    } else if (record.parsed.has_program_code()) {
      next_prompt = prompts::render_empty(deps_.templates);
    }

    if (record.parsed.human_input_requested) {
      record.outcome = StepOutcome::pause(PauseReason::MarkerRequested);
    } else if (record.parsed.terminal) {
      record.outcome = StepOutcome::pause(PauseReason::NoActionableOutput);
    } else {
      record.outcome = StepOutcome::proceed();
    }

    json completed{{"step", record.step_index},
                   {"outcome", record.outcome.kind == StepOutcome::Kind::Continue ? "continue" : "pause"},
                   {"next_step_index", state_.step_index},
                   {"next_prompt", next_prompt ? json(next_prompt->content) : json(nullptr)}};
    if (record.outcome.reason) {
      completed["pause_reason"] = to_string(*record.outcome.reason);
    }
    transcript_->append(EventKind::StepCompleted, std::move(completed));
    if (next_prompt) {
      history_.push_back(std::move(*next_prompt));
    }
    if (record.outcome.kind == StepOutcome::Kind::Pause) {
      pause(*record.outcome.reason);
    } else {
      set_status(Status::Stepping);
    }
  } catch (const StorageFailure &e) {
    fail(record, std::string("storage_failure: ") + e.what());
    return record;
  }
  if (on_step_boundary_) {
    on_step_boundary_(state_, record);
  }
  return record;
}

std::vector<StepRecord> Session::run_until_pause(std::optional<std::size_t> step_budget) {
  if (state_.status != Status::Stepping) {
    throw InvalidState("run_until_pause requires a stepping session");
  }
  std::vector<StepRecord> records;
  while (state_.status == Status::Stepping) {
    if (stop_requested_.exchange(false)) {
      pause(PauseReason::Interrupted);
      break;
    }
    if (state_.steps_this_turn() >= state_.max_steps) {
      pause(PauseReason::MaxStepsReached);
      break;
    }
    if (step_budget && records.size() >= *step_budget) {
      break;
    }
    records.push_back(step());
  }
  return records;
}

void Session::interrupt() {
  if (state_.status == Status::Stepping) {
    pause(PauseReason::Interrupted);
  }
}

void Session::close() {
  if (state_.status == Status::Closed) {
    return;
  }
  transcript_->append(EventKind::SessionClosed, json::object());
  set_status(Status::Closed);
}

} // namespace forgeloop::loop
