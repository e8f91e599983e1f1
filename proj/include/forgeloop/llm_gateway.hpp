#pragma once

#include "forgeloop/message.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace forgeloop::llm {

struct ModelRequest {
  std::vector<Message> messages;
  std::string model_id = "gpt-4-1106-preview";
  double temperature = 0.0;
  std::size_t max_response_chars = 0; // 0 = unlimited
};

enum class FinishReason { Stop, Length, Other };

struct ModelResponse {
  std::string text;
  FinishReason finish_reason = FinishReason::Stop;
  std::string finish_detail; // raw finish_reason when Other
  std::int64_t latency_ms = 0;
  std::optional<std::size_t> script_position; // empty for live responses
};

std::string_view to_string(FinishReason reason);

class GatewayError : public std::runtime_error {
public:
  enum class Kind { EndpointUnreachable, AuthRejected, ScriptExhausted, ScriptMismatch, BadRequest, ProtocolError };

  GatewayError(Kind kind, const std::string &message) : std::runtime_error(message), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

private:
  Kind kind_;
};

std::string_view to_string(GatewayError::Kind kind);

class ScriptParseError : public std::runtime_error {
public:
  ScriptParseError(std::size_t line, const std::string &cause)
      : std::runtime_error("script line " + std::to_string(line) + ": " + cause), line_(line) {}
  std::size_t line() const noexcept { return line_; }

private:
  std::size_t line_;
};

class ModelBackend {
public:
  virtual ~ModelBackend() = default;
  virtual ModelResponse complete(const ModelRequest &request) = 0;
};

// Throws std::invalid_argument for an empty message list.
void validate(const ModelRequest &request);

std::string prompt_digest(const std::vector<Message> &messages);

struct ScriptEntry {
  enum class Match { AnyNext, PromptContains };
  Match match = Match::AnyNext;
  std::string contains;
  std::string response;
};

// Replays a fixed sequence of responses. PromptContains entries are checked
// against the last message of the request.
class ScriptedModel final : public ModelBackend {
public:
  ScriptedModel() = default;
  explicit ScriptedModel(std::vector<ScriptEntry> entries) : entries_(std::move(entries)) {}

  ModelResponse complete(const ModelRequest &request) override;

  const std::vector<ScriptEntry> &entries() const noexcept { return entries_; }
  std::size_t cursor() const noexcept { return cursor_; }
  std::size_t remaining() const noexcept { return entries_.size() - cursor_; }

private:
  std::vector<ScriptEntry> entries_;
  std::size_t cursor_ = 0;
};

// YAML list; each item has `match` (any | prompt_contains), optional `contains`,
// and `response`.
ScriptedModel parse_script(std::string_view text);
ScriptedModel load_script(const std::filesystem::path &path);
std::vector<ScriptEntry> parse_script_entries(std::string_view text);
std::string dump_script(const std::vector<ScriptEntry> &entries);

struct LiveOptions {
  std::string base_url = "https://api.openai.com";
  std::string api_key;
  int retry_limit = 3;
  std::chrono::milliseconds base_delay{500};
  std::chrono::seconds timeout{120};
  // Replaced in tests to avoid real sleeping.
  std::function<void(std::chrono::milliseconds)> sleeper;
};

inline constexpr const char *kChatCompletionsPath = "/v1/chat/completions";
inline constexpr const char *kApiKeyEnv = "FORGELOOP_API_KEY";

// base_delay * 2^i for i in [0, retry_limit).
std::vector<std::chrono::milliseconds> backoff_schedule(int retry_limit, std::chrono::milliseconds base_delay);

nlohmann::json chat_request_body(const ModelRequest &request);
ModelResponse parse_chat_response(std::string_view body);

class LiveBackend final : public ModelBackend {
public:
  explicit LiveBackend(LiveOptions options);
  ModelResponse complete(const ModelRequest &request) override;

  int attempts_made() const noexcept { return last_attempts_; }
  const std::vector<std::chrono::milliseconds> &delays_used() const noexcept { return last_delays_; }

private:
  LiveOptions options_;
  int last_attempts_ = 0;
  std::vector<std::chrono::milliseconds> last_delays_;
};

// Passes through to another backend and keeps every response as an AnyNext entry.
class RecordingBackend final : public ModelBackend {
public:
  explicit RecordingBackend(ModelBackend &inner) : inner_(inner) {}
  ModelResponse complete(const ModelRequest &request) override;
  const std::vector<ScriptEntry> &recorded() const noexcept { return recorded_; }

private:
  ModelBackend &inner_;
  std::vector<ScriptEntry> recorded_;
};

} // namespace forgeloop::llm
