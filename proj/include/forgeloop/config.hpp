#pragma once

#include "forgeloop/executor.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>

namespace forgeloop::config {

class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Keys: mode, deny, allow, timeout_ms, max_output_bytes, confine_working_dir.
exec::PolicySettings parse_policy(std::string_view yaml);
exec::PolicySettings load_policy(const std::filesystem::path &file);

struct RuntimeConfig {
  std::string endpoint_url = "https://api.openai.com";
  std::string model_id = "gpt-4-1106-preview";
  std::optional<std::filesystem::path> templates_dir; // unset: built-in templates
  exec::PolicySettings policy;
  std::filesystem::path session_root = "forgeloop-sessions";
  std::size_t max_steps = 30;
  std::size_t history_window = 20;
  int console_port = 7466;
};

// Flattened key -> value. Recognized keys: endpoint_url, model_id, templates_dir,
// policy_file, policy_yaml, session_root, max_steps, history_window, console_port.
using ConfigLayer = std::map<std::string, std::string, std::less<>>;

using EnvLookup = std::function<std::optional<std::string>(const char *)>;
EnvLookup process_env();

// FORGELOOP_ENDPOINT, FORGELOOP_MODEL, FORGELOOP_TEMPLATES_DIR, FORGELOOP_POLICY,
// FORGELOOP_SESSION_ROOT, FORGELOOP_MAX_STEPS, FORGELOOP_HISTORY_WINDOW, FORGELOOP_CONSOLE_PORT.
ConfigLayer env_layer(const EnvLookup &env);

// A YAML mapping using the RuntimeConfig field names. `policy` may be a file path
// or an inline mapping. Relative paths resolve against the file's directory.
ConfigLayer file_layer(std::string_view yaml, const std::filesystem::path &base_dir);
ConfigLayer load_file_layer(const std::filesystem::path &file);

// flags > env > file > defaults. Throws ConfigError on malformed values.
RuntimeConfig resolve(const ConfigLayer &flags, const ConfigLayer &env, const ConfigLayer &file);

inline constexpr const char *kConfigEnv = "FORGELOOP_CONFIG";

} // namespace forgeloop::config
