#include "forgeloop/config.hpp"

#include "forgeloop/util.hpp"

#include <yaml-cpp/yaml.h>

#include <cstdlib>
#include <set>

namespace forgeloop::config {

namespace fs = std::filesystem;

namespace {

std::vector<std::string> string_list(const YAML::Node &node, const char *key) {
  std::vector<std::string> out;
  if (!node) {
    return out;
  }
  if (!node.IsSequence()) {
    throw ConfigError(std::string("policy '") + key + "' must be a list");
  }
  for (const auto &item : node) {
    out.push_back(item.as<std::string>());
  }
  return out;
}

exec::PolicySettings policy_from_node(const YAML::Node &root) {
  exec::PolicySettings settings;
  if (!root || root.IsNull()) {
    return settings;
  }
  if (!root.IsMap()) {
    throw ConfigError("policy must be a mapping");
  }
  static const std::set<std::string> kKeys{"mode", "deny", "allow", "timeout_ms", "max_output_bytes",
                                           "confine_working_dir"};
  for (const auto &kv : root) {
    const auto key = kv.first.as<std::string>();
    if (!kKeys.count(key)) {
      throw ConfigError("unknown policy key '" + key + "'");
    }
  }
  try {
    if (root["mode"]) {
      const auto name = root["mode"].as<std::string>();
      const auto mode = exec::policy_mode_from_string(name);
      if (!mode) {
        throw ConfigError("unknown policy mode '" + name + "'");
      }
      settings.mode = *mode;
    }
    settings.deny = string_list(root["deny"], "deny");
    settings.allow = string_list(root["allow"], "allow");
    if (root["timeout_ms"]) {
      settings.timeout_ms = root["timeout_ms"].as<std::int64_t>();
    }
    if (root["max_output_bytes"]) {
      settings.max_output_bytes = root["max_output_bytes"].as<std::size_t>();
    }
    if (root["confine_working_dir"]) {
      settings.confine_working_dir = root["confine_working_dir"].as<bool>();
    }
  } catch (const YAML::Exception &e) {
    throw ConfigError("policy: " + e.msg);
  }
  if (settings.timeout_ms <= 0) {
    throw ConfigError("policy timeout_ms must be positive");
  }
  try {
    exec::Policy check(settings);
  } catch (const exec::MalformedRule &e) {
    throw ConfigError(e.what());
  }
  return settings;
}

std::size_t parse_count(const std::string &key, const std::string &value, bool allow_zero) {
  std::size_t used = 0;
  unsigned long long n = 0;
  try {
    n = std::stoull(value, &used);
  } catch (const std::exception &) {
    throw ConfigError(key + " must be a non-negative integer, got '" + value + "'");
  }
  if (used != value.size() || value.front() == '-') {
    throw ConfigError(key + " must be a non-negative integer, got '" + value + "'");
  }
  if (!allow_zero && n == 0) {
    throw ConfigError(key + " must be positive");
  }
  return static_cast<std::size_t>(n);
}

const std::string *lookup(const ConfigLayer &layer, std::string_view key) {
  const auto it = layer.find(key);
  return it == layer.end() ? nullptr : &it->second;
}

} // namespace

exec::PolicySettings parse_policy(std::string_view yaml) {
  try {
    return policy_from_node(YAML::Load(std::string(yaml)));
  } catch (const YAML::Exception &e) {
    throw ConfigError("policy: " + e.msg);
  }
}

exec::PolicySettings load_policy(const fs::path &file) {
  const auto text = util::read_file(file);
  if (!text) {
    throw ConfigError("cannot read policy file " + file.string());
  }
  return parse_policy(*text);
}

EnvLookup process_env() {
  return [](const char *name) -> std::optional<std::string> {
    const char *value = std::getenv(name);
    if (value == nullptr) {
      return std::nullopt;
    }
    return std::string(value);
  };
}

ConfigLayer env_layer(const EnvLookup &env) {
  static const std::pair<const char *, const char *> kVars[] = {
      {"FORGELOOP_ENDPOINT", "endpoint_url"},         {"FORGELOOP_MODEL", "model_id"},
      {"FORGELOOP_TEMPLATES_DIR", "templates_dir"},   {"FORGELOOP_POLICY", "policy_file"},
      {"FORGELOOP_SESSION_ROOT", "session_root"},     {"FORGELOOP_MAX_STEPS", "max_steps"},
      {"FORGELOOP_HISTORY_WINDOW", "history_window"}, {"FORGELOOP_CONSOLE_PORT", "console_port"},
  };
  ConfigLayer layer;
  for (const auto &[var, key] : kVars) {
    if (auto value = env(var); value && !value->empty()) {
      layer[key] = *value;
    }
  }
  return layer;
}

ConfigLayer file_layer(std::string_view yaml, const fs::path &base_dir) {
  YAML::Node root;
  try {
    root = YAML::Load(std::string(yaml));
  } catch (const YAML::Exception &e) {
    throw ConfigError("config line " + std::to_string(e.mark.line + 1) + ": " + e.msg);
  }
  ConfigLayer layer;
  if (!root || root.IsNull()) {
    return layer;
  }
  if (!root.IsMap()) {
    throw ConfigError("config file must be a mapping");
  }
  static const std::set<std::string> kScalars{"endpoint_url", "model_id",       "templates_dir", "session_root",
                                              "max_steps",    "history_window", "console_port"};
  for (const auto &kv : root) {
    const auto key = kv.first.as<std::string>();
    if (key == "policy") {
      if (kv.second.IsMap()) {
        YAML::Emitter out;
        out << kv.second;
        layer["policy_yaml"] = out.c_str();
      } else {
        layer["policy_file"] = (base_dir / kv.second.as<std::string>()).string();
      }
    } else if (kScalars.count(key)) {
      if (!kv.second.IsScalar()) {
        throw ConfigError("config key '" + key + "' must be a scalar");
      }
      auto value = kv.second.as<std::string>();
      if ((key == "templates_dir" || key == "session_root") && fs::path(value).is_relative()) {
        value = (base_dir / value).string();
      }
      layer[key] = value;
    } else {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  return layer;
}

ConfigLayer load_file_layer(const fs::path &file) {
  const auto text = util::read_file(file);
  if (!text) {
    throw ConfigError("cannot read config file " + file.string());
  }
  return file_layer(*text, file.parent_path());
}

RuntimeConfig resolve(const ConfigLayer &flags, const ConfigLayer &env, const ConfigLayer &file) {
  const ConfigLayer *layers[] = {&flags, &env, &file};
  auto pick = [&](std::string_view key) -> const std::string * {
    for (const auto *layer : layers) {
      if (const auto *value = lookup(*layer, key)) {
        return value;
      }
    }
    return nullptr;
  };

  RuntimeConfig config;
  if (const auto *v = pick("endpoint_url")) {
    config.endpoint_url = *v;
  }
  if (const auto *v = pick("model_id")) {
    config.model_id = *v;
  }
  if (const auto *v = pick("templates_dir")) {
    config.templates_dir = fs::path(*v);
  }
  if (const auto *v = pick("session_root")) {
    config.session_root = fs::path(*v);
  }
  if (const auto *v = pick("max_steps")) {
    config.max_steps = parse_count("max_steps", *v, false);
  }
  if (const auto *v = pick("history_window")) {
    config.history_window = parse_count("history_window", *v, true);
  }
  if (const auto *v = pick("console_port")) {
    const auto port = parse_count("console_port", *v, true);
    if (port > 65535) {
      throw ConfigError("console_port out of range: " + *v);
    }
    config.console_port = static_cast<int>(port);
  }
  // A policy file and an inline policy at the same layer: the file wins.
  for (const auto *layer : layers) {
    if (const auto *path = lookup(*layer, "policy_file")) {
      config.policy = load_policy(*path);
      break;
    }
    if (const auto *inline_yaml = lookup(*layer, "policy_yaml")) {
      config.policy = parse_policy(*inline_yaml);
      break;
    }
  }
  return config;
}

} // namespace forgeloop::config
