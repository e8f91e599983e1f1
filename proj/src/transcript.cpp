#include "forgeloop/transcript.hpp"

#include "forgeloop/util.hpp"

#include <array>
#include <fcntl.h>
#include <unistd.h>

namespace forgeloop::transcript {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::array<std::pair<EventKind, std::string_view>, 15> kKindNames{{
    {EventKind::SessionCreated, "session_created"},
    {EventKind::TaskSubmitted, "task_submitted"},
    {EventKind::ModelQueried, "model_queried"},
    {EventKind::ModelResponded, "model_responded"},
    {EventKind::BlocksParsed, "blocks_parsed"},
    {EventKind::SnippetStaged, "snippet_staged"},
    {EventKind::CommandStarted, "command_started"},
    {EventKind::CommandFinished, "command_finished"},
    {EventKind::ApprovalRequested, "approval_requested"},
    {EventKind::ApprovalResolved, "approval_resolved"},
    {EventKind::StepCompleted, "step_completed"},
    {EventKind::Paused, "paused"},
    {EventKind::Resumed, "resumed"},
    {EventKind::SessionFailed, "session_failed"},
    {EventKind::SessionClosed, "session_closed"},
}};

} // namespace

std::string_view to_string(EventKind kind) {
  for (const auto &[k, name] : kKindNames) {
    if (k == kind) {
      return name;
    }
  }
  return "unknown";
}

std::optional<EventKind> event_kind_from_string(std::string_view name) {
  for (const auto &[k, n] : kKindNames) {
    if (n == name) {
      return k;
    }
  }
  return std::nullopt;
}

std::string to_line(const TranscriptEvent &event) {
  json j;
  j["seq"] = event.seq;
  j["t"] = event.t;
  j["kind"] = to_string(event.kind);
  j["payload"] = event.payload;
  return j.dump(-1, ' ', false, json::error_handler_t::replace);
}

TranscriptEvent from_line(std::string_view line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error &e) {
    throw std::invalid_argument(std::string("not valid JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("seq") || !j["seq"].is_number_unsigned() || !j.contains("t") ||
      !j["t"].is_string() || !j.contains("kind") || !j["kind"].is_string() || !j.contains("payload") ||
      !j["payload"].is_object()) {
    throw std::invalid_argument("record lacks seq/t/kind/payload");
  }
  const auto kind = event_kind_from_string(j["kind"].get<std::string>());
  if (!kind) {
    throw std::invalid_argument("unknown event kind " + j["kind"].get<std::string>());
  }
  TranscriptEvent event;
  event.seq = j["seq"].get<std::uint64_t>();
  event.t = j["t"].get<std::string>();
  event.kind = *kind;
  event.payload = std::move(j["payload"]);
  return event;
}

namespace {

struct ParsedPrefix {
  std::vector<TranscriptEvent> events;
  std::optional<Corruption> corruption;
  std::size_t valid_bytes = 0;
};

ParsedPrefix parse_prefix(std::string_view text) {
  ParsedPrefix out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const auto nl = text.find('\n', pos);
    const std::uint64_t expected = out.events.size();
    if (nl == std::string_view::npos) {
      out.corruption = Corruption{expected, "torn final record (no trailing newline)"};
      break;
    }
    const auto line = text.substr(pos, nl - pos);
    try {
      auto event = from_line(line);
      if (event.seq != expected) {
        out.corruption = Corruption{expected, "sequence gap: found seq " + std::to_string(event.seq)};
        break;
      }
      out.events.push_back(std::move(event));
    } catch (const std::invalid_argument &e) {
      out.corruption = Corruption{expected, e.what()};
      break;
    }
    pos = nl + 1;
    out.valid_bytes = pos;
  }
  return out;
}

} // namespace

std::shared_ptr<Transcript> Transcript::open(const fs::path &path, Durability durability) {
  std::shared_ptr<Transcript> t(new Transcript());
  t->path_ = path;
  t->durability_ = durability;
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  std::string existing;
  if (fs::exists(path)) {
    auto content = util::read_file(path);
    if (!content) {
      throw StorageFailure(path, "unreadable transcript");
    }
    existing = std::move(*content);
  }
  auto prefix = parse_prefix(existing);
  if (prefix.corruption) {
    if (::truncate(path.c_str(), static_cast<off_t>(prefix.valid_bytes)) != 0) {
      throw StorageFailure(path, "cannot cut torn transcript tail");
    }
    t->corruption_ = prefix.corruption;
  }
  t->events_ = std::move(prefix.events);
  t->closed_ = !t->events_.empty() && t->events_.back().kind == EventKind::SessionClosed;
  t->fd_ = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (t->fd_ < 0) {
    throw StorageFailure(path, "cannot open transcript for append");
  }
  return t;
}

std::shared_ptr<Transcript> Transcript::in_memory() { return std::shared_ptr<Transcript>(new Transcript()); }

Transcript::~Transcript() {
  if (fd_ >= 0) {
    ::close(fd_);
  }
}

namespace {

void scrub_strings(json &value, const std::vector<std::string> &secrets) {
  if (value.is_string()) {
    auto text = value.get<std::string>();
    for (const auto &s : secrets) {
      text = util::scrub(std::move(text), s);
    }
    value = std::move(text);
  } else if (value.is_structured()) {
    for (auto &child : value) {
      scrub_strings(child, secrets);
    }
  }
}

} // namespace

void Transcript::add_secret(std::string secret) {
  if (secret.empty()) {
    return;
  }
  std::lock_guard lock(mutex_);
  secrets_.push_back(std::move(secret));
}

std::uint64_t Transcript::append(EventKind kind, json payload) {
  std::unique_lock lock(mutex_);
  if (closed_) {
    throw TranscriptClosed();
  }
  if (!secrets_.empty()) {
    scrub_strings(payload, secrets_);
  }
  TranscriptEvent event;
  event.seq = events_.size();
  event.t = util::iso8601_utc(util::wall_clock_ms());
  event.kind = kind;
  event.payload = std::move(payload);
  if (fd_ >= 0) {
    const auto line = to_line(event) + "\n";
    std::size_t written = 0;
    while (written < line.size()) {
      const auto n = ::write(fd_, line.data() + written, line.size() - written);
      if (n < 0) {
        throw StorageFailure(path_, "transcript write failed");
      }
      written += static_cast<std::size_t>(n);
    }
    if (durability_ == Durability::Fsync && ::fdatasync(fd_) != 0) {
      throw StorageFailure(path_, "transcript fsync failed");
    }
  }
  if (kind == EventKind::SessionClosed) {
    closed_ = true;
  }
  events_.push_back(std::move(event));
  const auto seq = events_.back().seq;
  lock.unlock();
  cv_.notify_all();
  return seq;
}

std::vector<TranscriptEvent> Transcript::snapshot(std::uint64_t from_seq) const {
  std::lock_guard lock(mutex_);
  if (from_seq >= events_.size()) {
    return {};
  }
  return {events_.begin() + static_cast<std::ptrdiff_t>(from_seq), events_.end()};
}

std::size_t Transcript::size() const {
  std::lock_guard lock(mutex_);
  return events_.size();
}

bool Transcript::closed() const {
  std::lock_guard lock(mutex_);
  return closed_;
}

bool Transcript::wait_for(std::uint64_t from_seq, std::chrono::milliseconds timeout) const {
  std::unique_lock lock(mutex_);
  return cv_.wait_for(lock, timeout, [&] { return events_.size() > from_seq || closed_; });
}

namespace {

bool is_boundary(EventKind kind) {
  switch (kind) {
  case EventKind::SessionCreated:
  case EventKind::TaskSubmitted:
  case EventKind::Resumed:
  case EventKind::StepCompleted:
  case EventKind::Paused:
  case EventKind::SessionFailed:
  case EventKind::SessionClosed:
    return true;
  default:
    return false;
  }
}

std::size_t size_field(const json &payload, const char *key, std::size_t fallback) {
  if (payload.contains(key) && payload[key].is_number_unsigned()) {
    return payload[key].get<std::size_t>();
  }
  return fallback;
}

} // namespace

SessionState reconstruct(const std::vector<TranscriptEvent> &events, const fs::path &session_dir,
                         bool keep_in_flight) {
  SessionState state;
  state.session_dir = session_dir;
  SessionState boundary = state;
  for (const auto &event : events) {
    const auto &p = event.payload;
    switch (event.kind) {
    case EventKind::SessionCreated:
      state.session_id = p.value("session_id", std::string());
      state.max_steps = size_field(p, "max_steps", state.max_steps);
      if (p.contains("scenario") && p["scenario"].is_string()) {
        state.scenario = p["scenario"].get<std::string>();
      }
      state.status = Status::AwaitingTask;
      break;
    case EventKind::TaskSubmitted:
      state.task = p.value("task", std::string());
      state.step_index = size_field(p, "step_index", state.step_index);
      state.turn_start = state.step_index;
      state.status = Status::Stepping;
      state.pause_reason.reset();
      state.failure_cause.clear();
      break;
    case EventKind::Resumed:
      state.step_index = size_field(p, "step_index", state.step_index);
      state.turn_start = state.step_index;
      state.status = Status::Stepping;
      state.pause_reason.reset();
      state.failure_cause.clear();
      break;
    case EventKind::ApprovalRequested:
      state.status = Status::AwaitingHuman;
      state.pause_reason = PauseReason::ApprovalPending;
      break;
    case EventKind::ApprovalResolved:
      state.status = Status::Stepping;
      state.pause_reason.reset();
      break;
    case EventKind::StepCompleted:
      state.step_index = size_field(p, "next_step_index", state.step_index + 1);
      break;
    case EventKind::Paused:
      state.status = Status::AwaitingHuman;
      state.pause_reason = pause_reason_from_string(p.value("reason", std::string()));
      break;
    case EventKind::SessionFailed:
      state.status = Status::Failed;
      state.pause_reason.reset();
      state.failure_cause = p.value("cause", std::string());
      state.step_index = size_field(p, "step_index", state.step_index);
      break;
    case EventKind::SessionClosed:
      state.status = Status::Closed;
      state.pause_reason.reset();
      break;
    default:
      break;
    }
    if (is_boundary(event.kind)) {
      boundary = state;
    }
  }
  return keep_in_flight ? state : boundary;
}

LoadResult load_text(std::string_view text, const fs::path &session_dir, bool keep_in_flight) {
  auto prefix = parse_prefix(text);
  LoadResult result;
  result.state = reconstruct(prefix.events, session_dir, keep_in_flight);
  result.events = std::move(prefix.events);
  result.corruption = std::move(prefix.corruption);
  return result;
}

LoadResult load(const fs::path &path, bool keep_in_flight) {
  const auto text = util::read_file(path);
  if (!text) {
    throw StorageFailure(path, "transcript not found or unreadable");
  }
  return load_text(*text, path.parent_path(), keep_in_flight);
}

namespace {

bool is_volatile_key(const std::string &key) {
  return key == "t" || key == "latency_ms" || key == "duration_ms" || key == "started_ms" || key == "finished_ms" ||
         key == "created_at";
}

json stable_view(const json &value) {
  if (value.is_object()) {
    json out = json::object();
    for (const auto &[k, v] : value.items()) {
      if (!is_volatile_key(k)) {
        out[k] = stable_view(v);
      }
    }
    return out;
  }
  if (value.is_array()) {
    json out = json::array();
    for (const auto &v : value) {
      out.push_back(stable_view(v));
    }
    return out;
  }
  if (value.is_string()) {
    return util::normalize_newlines(value.get<std::string>());
  }
  return value;
}

} // namespace

std::string content_hash(const std::vector<TranscriptEvent> &events) {
  std::string canonical;
  for (const auto &event : events) {
    json j;
    j["seq"] = event.seq;
    j["kind"] = to_string(event.kind);
    j["payload"] = stable_view(event.payload);
    canonical += j.dump(-1, ' ', false, json::error_handler_t::replace);
    canonical.push_back('\n');
  }
  return util::sha256_hex(canonical);
}

} // namespace forgeloop::transcript
