#include "forgeloop/scenario_harness.hpp"

#include "forgeloop/config.hpp"
#include "forgeloop/util.hpp"

#include <httplib.h>
#include <yaml-cpp/yaml.h>

#include <cstdlib>
#include <deque>
#include <set>
#include <sstream>

namespace forgeloop::scenario {

namespace fs = std::filesystem;
using nlohmann::json;
using transcript::EventKind;

StubWebService::StubWebService(std::vector<StubRoute> routes) : routes_(std::move(routes)) {}

StubWebService::~StubWebService() { stop(); }

void StubWebService::start() {
  if (server_) {
    return;
  }
  server_ = std::make_unique<httplib::Server>();
  server_->Get(".*", [this](const httplib::Request &req, httplib::Response &res) {
    ++hits_;
    for (const auto &route : routes_) {
      if (route.path != req.path) {
        continue;
      }
      for (const auto &[key, value] : route.require_query) {
        if (!req.has_param(key) || req.get_param_value(key) != value) {
          res.status = 403;
          res.set_content(R"({"error":{"code":403,"message":"API key not valid"}})", "application/json");
          return;
        }
      }
      res.status = 200;
      res.set_content(route.body, route.content_type);
      return;
    }
    res.status = 404;
    res.set_content("not found", "text/plain");
  });
  port_ = server_->bind_to_any_port("127.0.0.1");
  if (port_ <= 0) {
    server_.reset();
    throw ScenarioInfrastructureError("stub web service could not bind a port on 127.0.0.1");
  }
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
}

void StubWebService::stop() {
  if (!server_) {
    return;
  }
  server_->stop();
  if (thread_.joinable()) {
    thread_.join();
  }
  server_.reset();
}

std::string StubWebService::base_url() const { return "http://127.0.0.1:" + std::to_string(port_); }

namespace {

template <class... Ts> struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts> overloaded(Ts...) -> overloaded<Ts...>;

std::string emit(const YAML::Node &node) {
  YAML::Emitter out;
  out << node;
  return out.c_str();
}

std::string required_string(const YAML::Node &node, const char *key, const std::string &where) {
  if (!node[key] || !node[key].IsScalar()) {
    throw ScenarioParseError(where + ": '" + key + "' is required");
  }
  return node[key].as<std::string>();
}

void check_keys(const YAML::Node &node, const std::set<std::string> &allowed, const std::string &where) {
  for (const auto &kv : node) {
    const auto key = kv.first.as<std::string>();
    if (!allowed.count(key)) {
      throw ScenarioParseError(where + ": unknown key '" + key + "'");
    }
  }
}

std::string read_source(const fs::path &base_dir, const std::string &relative) {
  const auto text = util::read_file(base_dir / relative);
  if (!text) {
    throw ScenarioInfrastructureError("cannot read scenario fixture " + (base_dir / relative).string());
  }
  return *text;
}

// Inline `<key>` or a fixture file named by `<key>_file` / `source`.
std::string content_or_file(const YAML::Node &node, const char *key, const char *file_key, const fs::path &base_dir,
                            const std::string &where) {
  if (node[key]) {
    return node[key].as<std::string>();
  }
  if (node[file_key]) {
    return read_source(base_dir, node[file_key].as<std::string>());
  }
  throw ScenarioParseError(where + ": needs '" + key + "' or '" + file_key + "'");
}

bool safe_relative(const fs::path &p) {
  if (p.empty() || p.is_absolute()) {
    return false;
  }
  for (const auto &part : p) {
    if (part == "..") {
      return false;
    }
  }
  return true;
}

Status parse_status(const std::string &name, const std::string &where) {
  const auto status = status_from_string(name);
  if (!status) {
    throw ScenarioParseError(where + ": unknown status '" + name + "'");
  }
  return *status;
}

PauseReason parse_reason(const std::string &name, const std::string &where) {
  const auto reason = pause_reason_from_string(name);
  if (!reason) {
    throw ScenarioParseError(where + ": unknown pause reason '" + name + "'");
  }
  return *reason;
}

Assertion parse_assertion(const YAML::Node &node, const fs::path &base_dir, std::size_t index) {
  const auto where = "assertion " + std::to_string(index + 1);
  if (!node.IsMap()) {
    throw ScenarioParseError(where + ": must be a mapping");
  }
  const auto type = required_string(node, "type", where);
  if (type == "file_exists") {
    check_keys(node, {"type", "path"}, where);
    return FileExists{required_string(node, "path", where)};
  }
  if (type == "file_contains") {
    check_keys(node, {"type", "path", "text"}, where);
    return FileContains{required_string(node, "path", where), required_string(node, "text", where)};
  }
  if (type == "file_equals") {
    check_keys(node, {"type", "path", "content", "source"}, where);
    return FileEquals{required_string(node, "path", where),
                      content_or_file(node, "content", "source", base_dir, where)};
  }
  if (type == "command_output_equals") {
    check_keys(node, {"type", "command", "expected", "expected_file", "occurrence"}, where);
    CommandOutputEquals a;
    a.command = required_string(node, "command", where);
    a.expected = content_or_file(node, "expected", "expected_file", base_dir, where);
    const auto occurrence = node["occurrence"] ? node["occurrence"].as<std::string>() : std::string("last");
    if (occurrence == "first") {
      a.occurrence = Occurrence::First;
    } else if (occurrence != "last") {
      throw ScenarioParseError(where + ": occurrence must be first or last");
    }
    return a;
  }
  if (type == "session_ended_in") {
    check_keys(node, {"type", "status", "reason"}, where);
    SessionEndedIn a;
    a.status = parse_status(required_string(node, "status", where), where);
    if (node["reason"]) {
      a.reason = parse_reason(node["reason"].as<std::string>(), where);
    }
    return a;
  }
  if (type == "ranking_equals") {
    check_keys(node, {"type", "command", "expected"}, where);
    RankingEquals a;
    a.command = required_string(node, "command", where);
    if (!node["expected"] || !node["expected"].IsSequence()) {
      throw ScenarioParseError(where + ": 'expected' must be a list");
    }
    for (const auto &item : node["expected"]) {
      a.expected.push_back(item.as<std::string>());
    }
    return a;
  }
  if (type == "output_set_equals") {
    check_keys(node, {"type", "command", "expected"}, where);
    OutputSetEquals a;
    a.command = required_string(node, "command", where);
    if (!node["expected"] || !node["expected"].IsSequence()) {
      throw ScenarioParseError(where + ": 'expected' must be a list");
    }
    for (const auto &item : node["expected"]) {
      a.expected.push_back(item.as<std::string>());
    }
    return a;
  }
  if (type == "pause_count") {
    check_keys(node, {"type", "reason", "count"}, where);
    PauseCount a;
    a.reason = parse_reason(required_string(node, "reason", where), where);
    a.count = node["count"] ? node["count"].as<std::size_t>() : 0;
    return a;
  }
  throw ScenarioParseError(where + ": unknown assertion type '" + type + "'");
}

exec::ApprovalDecision parse_decision(const std::string &name) {
  if (name == "approve") {
    return exec::ApprovalDecision::Approve;
  }
  if (name == "deny") {
    return exec::ApprovalDecision::Deny;
  }
  if (name == "timed_out") {
    return exec::ApprovalDecision::TimedOut;
  }
  throw ScenarioParseError("unknown approval decision '" + name + "'");
}

class QueuedApproval final : public exec::ApprovalOracle {
public:
  explicit QueuedApproval(const std::vector<exec::ApprovalDecision> &decisions)
      : queue_(decisions.begin(), decisions.end()) {}

  exec::ApprovalDecision decide(const exec::CommandRequest &) override {
    if (queue_.empty()) {
      return exec::ApprovalDecision::TimedOut;
    }
    const auto d = queue_.front();
    queue_.pop_front();
    return d;
  }

private:
  std::deque<exec::ApprovalDecision> queue_;
};

fs::path make_temp_dir(const std::string &name) {
  auto pattern = (fs::temp_directory_path() / ("forgeloop-" + name + "-XXXXXX")).string();
  if (mkdtemp(pattern.data()) == nullptr) {
    throw ScenarioInfrastructureError("cannot create a temporary session directory");
  }
  return pattern;
}

std::optional<json> find_finished(const std::vector<transcript::TranscriptEvent> &events, const std::string &command,
                                  Occurrence occurrence) {
  std::optional<json> found;
  for (const auto &e : events) {
    if (e.kind == EventKind::CommandFinished && e.payload.value("command", std::string()) == command) {
      found = e.payload;
      if (occurrence == Occurrence::First) {
        break;
      }
    }
  }
  return found;
}

std::string excerpt(std::string_view text, std::size_t limit = 400) {
  std::string s(text.substr(0, limit));
  if (text.size() > limit) {
    s += "...";
  }
  return json(s).dump();
}

} // namespace

std::string describe(const Assertion &assertion) {
  return std::visit(
      overloaded{
          [](const FileExists &a) { return "file_exists " + a.path; },
          [](const FileContains &a) { return "file_contains " + a.path + " " + excerpt(a.text, 60); },
          [](const FileEquals &a) { return "file_equals " + a.path; },
          [](const CommandOutputEquals &a) {
            return std::string("command_output_equals (") + (a.occurrence == Occurrence::First ? "first" : "last") +
                   ") " + a.command;
          },
          [](const SessionEndedIn &a) {
            std::string s = "session_ended_in " + std::string(to_string(a.status));
            if (a.reason) {
              s += " (" + std::string(to_string(*a.reason)) + ")";
            }
            return s;
          },
          [](const RankingEquals &a) {
            std::string s = "ranking_equals " + a.command + " ->";
            for (const auto &id : a.expected) {
              s += " " + id;
            }
            return s;
          },
          [](const OutputSetEquals &a) {
            return "output_set_equals " + a.command + " (" + std::to_string(a.expected.size()) + " lines)";
          },
          [](const PauseCount &a) {
            return "pause_count " + std::string(to_string(a.reason)) + " == " + std::to_string(a.count);
          },
      },
      assertion);
}

Scenario parse_scenario(std::string_view yaml, const fs::path &base_dir) {
  YAML::Node root;
  try {
    root = YAML::Load(std::string(yaml));
  } catch (const YAML::Exception &e) {
    throw ScenarioParseError("scenario line " + std::to_string(e.mark.line + 1) + ": " + e.msg);
  }
  if (!root || !root.IsMap()) {
    throw ScenarioParseError("scenario must be a mapping");
  }
  check_keys(root,
             {"name", "task", "os", "max_steps", "resume_inputs", "script", "script_file", "initial_files",
              "stub_services", "policy", "approvals", "assertions"},
             "scenario");
  Scenario s;
  try {
    s.name = required_string(root, "name", "scenario");
    s.task = required_string(root, "task", "scenario");
    if (util::is_blank(s.task)) {
      throw ScenarioParseError("scenario: task must not be blank");
    }
    if (root["os"]) {
      s.os = root["os"].as<std::string>();
    }
    if (root["max_steps"]) {
      s.max_steps = root["max_steps"].as<std::size_t>();
      if (s.max_steps == 0) {
        throw ScenarioParseError("scenario: max_steps must be positive");
      }
    }
    for (const auto &item : root["resume_inputs"]) {
      s.resume_inputs.push_back(item.as<std::string>());
    }

    if (root["script"] && root["script_file"]) {
      throw ScenarioParseError("scenario: give either 'script' or 'script_file'");
    }
    try {
      if (root["script"]) {
        s.script = llm::parse_script_entries(emit(root["script"]));
      } else if (root["script_file"]) {
        s.script = llm::parse_script_entries(read_source(base_dir, root["script_file"].as<std::string>()));
      }
    } catch (const llm::ScriptParseError &e) {
      throw ScenarioParseError(std::string("scenario script: ") + e.what());
    }

    std::size_t index = 0;
    for (const auto &item : root["initial_files"]) {
      const auto where = "initial file " + std::to_string(++index);
      check_keys(item, {"path", "content", "source"}, where);
      InitialFile f;
      f.path = required_string(item, "path", where);
      if (!safe_relative(f.path)) {
        throw ScenarioParseError(where + ": path must stay inside the session directory");
      }
      f.content = content_or_file(item, "content", "source", base_dir, where);
      s.initial_files.push_back(std::move(f));
    }

    index = 0;
    for (const auto &item : root["stub_services"]) {
      const auto where = "stub route " + std::to_string(++index);
      check_keys(item, {"path", "body", "body_file", "content_type", "require_query"}, where);
      StubRoute r;
      r.path = required_string(item, "path", where);
      r.body = content_or_file(item, "body", "body_file", base_dir, where);
      if (item["content_type"]) {
        r.content_type = item["content_type"].as<std::string>();
      }
      for (const auto &kv : item["require_query"]) {
        r.require_query[kv.first.as<std::string>()] = kv.second.as<std::string>();
      }
      s.stub_routes.push_back(std::move(r));
    }

    if (root["policy"]) {
      try {
        s.policy = config::parse_policy(emit(root["policy"]));
      } catch (const config::ConfigError &e) {
        throw ScenarioParseError(std::string("scenario ") + e.what());
      }
    }
    for (const auto &item : root["approvals"]) {
      s.approvals.push_back(parse_decision(item.as<std::string>()));
    }
    index = 0;
    for (const auto &item : root["assertions"]) {
      s.assertions.push_back(parse_assertion(item, base_dir, index++));
    }
  } catch (const YAML::Exception &e) {
    throw ScenarioParseError("scenario line " + std::to_string(e.mark.line + 1) + ": " + e.msg);
  }
  return s;
}

Scenario load_scenario(const fs::path &file) {
  const auto text = util::read_file(file);
  if (!text) {
    throw ScenarioInfrastructureError("cannot read scenario file " + file.string());
  }
  return parse_scenario(*text, file.parent_path());
}

Scenario find_scenario(const fs::path &dir, std::string_view name) {
  const auto file = dir / (std::string(name) + ".yaml");
  if (name.empty() || !fs::is_regular_file(file)) {
    throw ScenarioInfrastructureError("no scenario named '" + std::string(name) + "' in " + dir.string());
  }
  return load_scenario(file);
}

std::vector<std::string> list_scenarios(const fs::path &dir) {
  std::vector<std::string> names;
  std::error_code ec;
  for (const auto &entry : fs::directory_iterator(dir, ec)) {
    if (entry.is_regular_file() && entry.path().extension() == ".yaml") {
      names.push_back(entry.path().stem().string());
    }
  }
  std::sort(names.begin(), names.end());
  return names;
}

bool ScenarioReport::passed() const {
  return std::all_of(assertions.begin(), assertions.end(), [](const AssertionResult &r) { return r.passed; });
}

std::vector<AssertionResult> evaluate(const Scenario &scenario, const std::vector<transcript::TranscriptEvent> &events,
                                      const SessionState &state, const fs::path &session_dir) {
  std::vector<AssertionResult> results;
  for (const auto &assertion : scenario.assertions) {
    AssertionResult r;
    r.description = describe(assertion);
    std::visit(overloaded{
                   [&](const FileExists &a) {
                     r.passed = fs::is_regular_file(session_dir / a.path);
                     if (!r.passed) {
                       r.detail = a.path + " does not exist";
                     }
                   },
                   [&](const FileContains &a) {
                     const auto text = util::read_file(session_dir / a.path);
                     r.passed = text && text->find(a.text) != std::string::npos;
                     if (!r.passed) {
                       r.detail = text ? "text not found" : a.path + " does not exist";
                     }
                   },
                   [&](const FileEquals &a) {
                     const auto text = util::read_file(session_dir / a.path);
                     r.passed = text && util::normalize_newlines(*text) == util::normalize_newlines(a.content);
                     if (!r.passed) {
                       r.detail = text ? "actual " + excerpt(*text) : a.path + " does not exist";
                     }
                   },
                   [&](const CommandOutputEquals &a) {
                     const auto finished = find_finished(events, a.command, a.occurrence);
                     if (!finished) {
                       r.detail = "command never ran";
                       return;
                     }
                     const auto out = util::normalize_newlines(finished->value("stdout", std::string()));
                     r.passed = out == util::normalize_newlines(a.expected);
                     if (!r.passed) {
                       r.detail = "actual " + excerpt(out);
                     }
                   },
                   [&](const SessionEndedIn &a) {
                     r.passed = state.status == a.status && (!a.reason || state.pause_reason == a.reason);
                     if (!r.passed) {
                       r.detail = "ended in " + std::string(to_string(state.status));
                       if (state.pause_reason) {
                         r.detail += " (" + std::string(to_string(*state.pause_reason)) + ")";
                       }
                     }
                   },
                   [&](const RankingEquals &a) {
                     const auto finished = find_finished(events, a.command, Occurrence::Last);
                     if (!finished) {
                       r.detail = "command never ran";
                       return;
                     }
                     std::vector<std::string> ids;
                     std::istringstream lines(finished->value("stdout", std::string()));
                     std::string line;
                     while (std::getline(lines, line)) {
                       std::istringstream tokens(line);
                       std::string first;
                       if (tokens >> first) {
                         ids.push_back(first);
                       }
                     }
                     r.passed = ids == a.expected;
                     if (!r.passed) {
                       r.detail = "actual";
                       for (const auto &id : ids) {
                         r.detail += " " + id;
                       }
                     }
                   },
                   [&](const OutputSetEquals &a) {
                     const auto finished = find_finished(events, a.command, Occurrence::Last);
                     if (!finished) {
                       r.detail = "command never ran";
                       return;
                     }
                     std::set<std::string> actual;
                     std::istringstream lines(util::normalize_newlines(finished->value("stdout", std::string())));
                     std::string line;
                     while (std::getline(lines, line)) {
                       if (!line.empty()) {
                         actual.insert(line);
                       }
                     }
                     const std::set<std::string> expected(a.expected.begin(), a.expected.end());
                     r.passed = actual == expected;
                     if (!r.passed) {
                       r.detail = "actual";
                       for (const auto &l : actual) {
                         r.detail += " " + excerpt(l, 80);
                       }
                     }
                   },
                   [&](const PauseCount &a) {
                     std::size_t n = 0;
                     for (const auto &e : events) {
                       if (e.kind == EventKind::Paused && e.payload.value("reason", std::string()) == to_string(a.reason)) {
                         ++n;
                       }
                     }
                     r.passed = n == a.count;
                     if (!r.passed) {
                       r.detail = "observed " + std::to_string(n);
                     }
                   },
               },
               assertion);
    results.push_back(std::move(r));
  }
  return results;
}

ScenarioReport run_scenario(const Scenario &scenario, const RunOptions &options) {
  const auto started = util::steady_clock_ms();
  fs::path dir;
  bool temporary = false;
  if (options.session_dir) {
    dir = fs::absolute(*options.session_dir);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) {
      throw ScenarioInfrastructureError("cannot create session directory " + dir.string() + ": " + ec.message());
    }
  } else {
    dir = make_temp_dir(scenario.name);
    temporary = !options.keep_session_dir;
  }
  struct Cleanup {
    fs::path dir;
    bool active;
    ~Cleanup() {
      if (active) {
        std::error_code ec;
        fs::remove_all(dir, ec);
      }
    }
  } cleanup{dir, temporary};

  try {
    for (const auto &f : scenario.initial_files) {
      const auto target = dir / f.path;
      fs::create_directories(target.parent_path());
      util::write_file_atomic(target, f.content);
    }
  } catch (const std::exception &e) {
    throw ScenarioInfrastructureError(std::string("seeding initial files failed: ") + e.what());
  }

  StubWebService stub(scenario.stub_routes);
  exec::ExecutorOptions exec_options;
  if (!scenario.stub_routes.empty()) {
    stub.start();
    exec_options.extra_env[kStubUrlEnv] = stub.base_url();
  }
  exec::Executor executor(exec_options);
  llm::ScriptedModel model(options.script.value_or(scenario.script));
  QueuedApproval approval(scenario.approvals);

  loop::LoopDeps deps;
  deps.model = &model;
  deps.executor = &executor;
  deps.approval = &approval;
  deps.parser = options.parser;
  deps.policy = exec::Policy(scenario.policy);
  deps.env_facts = {{"os", scenario.os}};

  loop::SessionOptions session_options;
  session_options.session_id = scenario.name;
  session_options.session_dir = dir;
  session_options.max_steps = scenario.max_steps;
  if (options.record_scenario_name) {
    session_options.scenario = scenario.name;
  }
  session_options.durability = options.durability;

  std::unique_ptr<loop::Session> session;
  try {
    session = loop::Session::create(session_options, deps);
  } catch (const StorageFailure &e) {
    throw ScenarioInfrastructureError(e.what());
  } catch (const loop::InvalidState &e) {
    throw ScenarioInfrastructureError(e.what());
  }
  if (options.configure_session) {
    options.configure_session(*session);
  }

  session->submit_task(scenario.task);
  session->run_until_pause();
  for (const auto &input : scenario.resume_inputs) {
    if (!session->state().accepts_input()) {
      break;
    }
    session->submit_task(input);
    session->run_until_pause();
  }
  if (options.close_at_end) {
    session->close();
  }
  stub.stop();

  ScenarioReport report;
  report.name = scenario.name;
  report.final_state = session->state();
  report.events = session->log()->snapshot();
  report.transcript_hash = transcript::content_hash(report.events);
  report.session_dir = dir;
  report.assertions = evaluate(scenario, report.events, report.final_state, dir);
  report.elapsed_ms = util::steady_clock_ms() - started;
  return report;
}

ReplayReport replay_transcript(const fs::path &transcript_path, const fs::path &scenarios_dir,
                               const parser::ParserConfig &parser) {
  if (!fs::is_regular_file(transcript_path)) {
    throw ScenarioInfrastructureError("no transcript at " + transcript_path.string());
  }
  const auto loaded = transcript::load(transcript_path, true);
  if (loaded.events.empty() || loaded.events.front().kind != EventKind::SessionCreated) {
    throw ScenarioInfrastructureError("transcript does not start with session_created: " + transcript_path.string());
  }
  const auto &created = loaded.events.front().payload;

  Scenario scenario;
  RunOptions options;
  options.parser = parser;
  if (created.contains("scenario") && created["scenario"].is_string()) {
    scenario = find_scenario(scenarios_dir, created["scenario"].get<std::string>());
  } else {
    scenario.name = created.value("session_id", std::string("replay"));
    options.record_scenario_name = false;
  }
  scenario.max_steps = created.value("max_steps", scenario.max_steps);
  scenario.resume_inputs.clear();
  scenario.approvals.clear();
  std::vector<llm::ScriptEntry> script;
  bool have_task = false;
  for (const auto &e : loaded.events) {
    switch (e.kind) {
    case EventKind::TaskSubmitted:
      scenario.task = e.payload.value("task", std::string());
      have_task = true;
      break;
    case EventKind::Resumed:
      scenario.resume_inputs.push_back(e.payload.value("text", std::string()));
      break;
    case EventKind::ModelResponded:
      script.push_back({llm::ScriptEntry::Match::AnyNext, {}, e.payload.value("text", std::string())});
      break;
    case EventKind::ApprovalResolved:
      scenario.approvals.push_back(parse_decision(e.payload.value("decision", std::string("timed_out"))));
      break;
    default:
      break;
    }
  }
  if (!have_task) {
    throw ScenarioInfrastructureError("transcript has no submitted task: " + transcript_path.string());
  }
  options.script = std::move(script);
  options.close_at_end = loaded.events.back().kind == EventKind::SessionClosed;

  ReplayReport report;
  report.recorded_hash = transcript::content_hash(loaded.events);
  report.scenario_report = run_scenario(scenario, options);
  report.replayed_hash = report.scenario_report->transcript_hash;
  return report;
}

} // namespace forgeloop::scenario
