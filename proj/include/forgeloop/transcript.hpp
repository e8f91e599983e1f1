#pragma once

#include "forgeloop/session_state.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace forgeloop::transcript {

enum class EventKind {
  SessionCreated,
  TaskSubmitted,
  ModelQueried,
  ModelResponded,
  BlocksParsed,
  SnippetStaged,
  CommandStarted,
  CommandFinished,
  ApprovalRequested,
  ApprovalResolved,
  StepCompleted,
  Paused,
  Resumed,
  SessionFailed,
  SessionClosed,
};

std::string_view to_string(EventKind kind);
std::optional<EventKind> event_kind_from_string(std::string_view name);

struct TranscriptEvent {
  std::uint64_t seq = 0;
  std::string t; // ISO-8601 UTC wall time
  EventKind kind = EventKind::SessionCreated;
  nlohmann::json payload = nlohmann::json::object();

  bool operator==(const TranscriptEvent &) const = default;
};

// One JSON object per line: {"seq", "t", "kind", "payload"}.
std::string to_line(const TranscriptEvent &event);
TranscriptEvent from_line(std::string_view line); // throws std::invalid_argument

class TranscriptClosed : public std::logic_error {
public:
  TranscriptClosed() : std::logic_error("transcript already has a session_closed event") {}
};

struct Corruption {
  std::uint64_t seq = 0; // seq the bad line would have had
  std::string cause;
};

struct LoadResult {
  std::vector<TranscriptEvent> events;
  SessionState state;
  std::optional<Corruption> corruption;
};

enum class Durability { Fsync, Flush };

// Append-only log. One writer; readers may snapshot or block for new events from
// any thread.
class Transcript {
public:
  // Opens (creating if needed) a file-backed transcript. A torn trailing record is
  // cut off so appends continue from the last valid event.
  static std::shared_ptr<Transcript> open(const std::filesystem::path &path, Durability durability = Durability::Fsync);
  static std::shared_ptr<Transcript> in_memory();

  ~Transcript();
  Transcript(const Transcript &) = delete;
  Transcript &operator=(const Transcript &) = delete;

  // Every later append replaces occurrences of secret in payload strings.
  void add_secret(std::string secret);

  // Durable before return. Throws TranscriptClosed after session_closed, StorageFailure on I/O.
  std::uint64_t append(EventKind kind, nlohmann::json payload);

  std::vector<TranscriptEvent> snapshot(std::uint64_t from_seq = 0) const;
  std::size_t size() const;
  bool closed() const;
  // Blocks until an event with seq >= from_seq exists, the log is closed, or timeout.
  bool wait_for(std::uint64_t from_seq, std::chrono::milliseconds timeout) const;

  const std::filesystem::path &path() const noexcept { return path_; }
  std::optional<Corruption> recovered_corruption() const { return corruption_; }

private:
  Transcript() = default;

  std::filesystem::path path_;
  Durability durability_ = Durability::Fsync;
  int fd_ = -1;
  mutable std::mutex mutex_;
  mutable std::condition_variable cv_;
  std::vector<TranscriptEvent> events_;
  std::vector<std::string> secrets_;
  bool closed_ = false;
  std::optional<Corruption> corruption_;
};

// Loads the valid prefix of a transcript file and replays it through the session
// state machine. An in-flight step (events after the last step boundary) is rolled
// back unless keep_in_flight is set.
LoadResult load(const std::filesystem::path &path, bool keep_in_flight = false);
LoadResult load_text(std::string_view text, const std::filesystem::path &session_dir, bool keep_in_flight = false);

SessionState reconstruct(const std::vector<TranscriptEvent> &events, const std::filesystem::path &session_dir,
                         bool keep_in_flight = false);

// Hash over seq, kind and payload with wall-clock and latency fields dropped and
// newlines normalized.
std::string content_hash(const std::vector<TranscriptEvent> &events);

} // namespace forgeloop::transcript
