#pragma once

#include "forgeloop/config.hpp"
#include "forgeloop/executor.hpp"
#include "forgeloop/llm_gateway.hpp"
#include "forgeloop/prompt_engine.hpp"
#include "forgeloop/transcript.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <condition_variable>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace forgeloop::console {

class PortInUse : public std::runtime_error {
public:
  explicit PortInUse(int port) : std::runtime_error("port " + std::to_string(port) + " is already in use") {}
};

struct SessionOverrides {
  std::optional<std::size_t> max_steps;
  std::optional<std::string> model_id;
  std::optional<std::filesystem::path> script;
  std::optional<std::size_t> history_window;
  std::optional<std::string> session_id;
};

// Body of POST /sessions. Throws std::invalid_argument on bad values.
SessionOverrides parse_overrides(const nlohmann::json &body);

using BackendFactory = std::function<std::unique_ptr<llm::ModelBackend>(const SessionOverrides &)>;

struct ConsoleOptions {
  std::string bind_address = "127.0.0.1";
  int port = 7466; // 0 picks an ephemeral port
  // Required for non-loopback binds; checked on every request when set.
  std::optional<std::string> bearer_token;
  std::optional<std::filesystem::path> static_dir;
  std::filesystem::path session_root = "forgeloop-sessions";
  config::RuntimeConfig runtime;
  prompts::PromptTemplateSet templates = prompts::PromptTemplateSet::defaults();
  prompts::Facts env_facts;
  BackendFactory backend_factory;
  exec::ExecutorOptions executor;
  std::chrono::milliseconds approval_timeout{std::chrono::minutes(10)};
  transcript::Durability durability = transcript::Durability::Fsync;
  // Stream writes that stall longer than this drop the connection.
  std::chrono::milliseconds stream_send_timeout{std::chrono::seconds(5)};
  // Scrubbed from every session transcript.
  std::vector<std::string> secrets;
};

bool is_loopback(std::string_view address);

// Summary of a session from its transcript prefix alone.
nlohmann::json summarize(const std::vector<transcript::TranscriptEvent> &events);

// Approval oracle fed by HTTP requests. announce() registers the request before
// the loop publishes approval_requested, so a resolve can never arrive early.
class ConsoleApproval final : public exec::ApprovalOracle {
public:
  enum class Resolution { Delivered, NotFound, AlreadyResolved };

  explicit ConsoleApproval(std::chrono::milliseconds timeout) : timeout_(timeout) {}

  void announce(const exec::CommandRequest &request) override;
  exec::ApprovalDecision decide(const exec::CommandRequest &request) override;
  Resolution resolve(const std::string &exec_id, exec::ApprovalDecision decision);
  // Pending and future decisions time out immediately.
  void shutdown();

private:
  std::chrono::milliseconds timeout_;
  std::mutex mutex_;
  std::condition_variable cv_;
  std::map<std::string, std::optional<exec::ApprovalDecision>> pending_;
  std::set<std::string> resolved_;
  bool shutdown_ = false;
};

struct HttpReply {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";
};

class ConsoleServer {
public:
  explicit ConsoleServer(ConsoleOptions options);
  ~ConsoleServer();
  ConsoleServer(const ConsoleServer &) = delete;
  ConsoleServer &operator=(const ConsoleServer &) = delete;

  // Restores sessions found under session_root, then binds. Throws PortInUse, or
  // std::invalid_argument for a non-loopback bind without a bearer token.
  void start();
  // Interrupts stepping sessions, times out pending approvals, closes streams.
  void stop();
  bool running() const;

  int port() const;
  std::string url() const;

  // The REST surface without the socket; used by the server and by tests.
  HttpReply handle(std::string_view method, std::string_view target, std::string_view body,
                   std::string_view authorization = {});

  std::vector<std::string> session_ids() const;
  std::shared_ptr<transcript::Transcript> transcript_of(const std::string &session_id) const;

private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

} // namespace forgeloop::console
