#include "forgeloop/llm_gateway.hpp"

#include "forgeloop/util.hpp"

#include <httplib.h>
#include <yaml-cpp/yaml.h>

#include <set>
#include <thread>

namespace forgeloop::llm {

using nlohmann::json;

std::string_view to_string(FinishReason reason) {
  switch (reason) {
  case FinishReason::Stop:
    return "stop";
  case FinishReason::Length:
    return "length";
  case FinishReason::Other:
    return "other";
  }
  return "other";
}

std::string_view to_string(GatewayError::Kind kind) {
  switch (kind) {
  case GatewayError::Kind::EndpointUnreachable:
    return "endpoint_unreachable";
  case GatewayError::Kind::AuthRejected:
    return "auth_rejected";
  case GatewayError::Kind::ScriptExhausted:
    return "script_exhausted";
  case GatewayError::Kind::ScriptMismatch:
    return "script_mismatch";
  case GatewayError::Kind::BadRequest:
    return "bad_request";
  case GatewayError::Kind::ProtocolError:
    return "protocol_error";
  }
  return "protocol_error";
}

void validate(const ModelRequest &request) {
  if (request.messages.empty()) {
    throw std::invalid_argument("model request needs at least one message");
  }
}

std::string prompt_digest(const std::vector<Message> &messages) {
  std::string canonical;
  for (const auto &m : messages) {
    canonical += to_string(m.role);
    canonical.push_back('\0');
    canonical += m.content;
    canonical.push_back('\0');
  }
  return util::sha256_hex(canonical);
}

ModelResponse ScriptedModel::complete(const ModelRequest &request) {
  validate(request);
  if (cursor_ >= entries_.size()) {
    throw GatewayError(GatewayError::Kind::ScriptExhausted,
                       "script exhausted after " + std::to_string(entries_.size()) + " responses");
  }
  const auto &entry = entries_[cursor_];
  if (entry.match == ScriptEntry::Match::PromptContains &&
      request.messages.back().content.find(entry.contains) == std::string::npos) {
    throw GatewayError(GatewayError::Kind::ScriptMismatch,
                       "script entry " + std::to_string(cursor_) + " expected prompt containing \"" + entry.contains +
                           "\", got prompt " + prompt_digest(request.messages).substr(0, 16));
  }
  ModelResponse response;
  response.text = entry.response;
  response.script_position = cursor_;
  if (request.max_response_chars > 0 && response.text.size() > request.max_response_chars) {
    response.text.resize(util::utf8_floor(response.text, request.max_response_chars));
    response.finish_reason = FinishReason::Length;
  }
  ++cursor_;
  return response;
}

std::vector<ScriptEntry> parse_script_entries(std::string_view text) {
  YAML::Node root;
  try {
    root = YAML::Load(std::string(text));
  } catch (const YAML::Exception &e) {
    throw ScriptParseError(static_cast<std::size_t>(e.mark.line + 1), e.msg);
  }
  std::vector<ScriptEntry> entries;
  if (!root || root.IsNull()) {
    return entries;
  }
  if (!root.IsSequence()) {
    throw ScriptParseError(static_cast<std::size_t>(root.Mark().line + 1), "script must be a list of entries");
  }
  static const std::set<std::string> kKeys{"match", "contains", "response"};
  for (const auto &item : root) {
    const auto line = static_cast<std::size_t>(item.Mark().line + 1);
    if (!item.IsMap()) {
      throw ScriptParseError(line, "entry must be a mapping");
    }
    for (const auto &kv : item) {
      const auto key = kv.first.as<std::string>();
      if (!kKeys.count(key)) {
        throw ScriptParseError(static_cast<std::size_t>(kv.first.Mark().line + 1), "unknown field '" + key + "'");
      }
    }
    ScriptEntry entry;
    const auto match = item["match"] ? item["match"].as<std::string>() : std::string("any");
    if (match == "any") {
      entry.match = ScriptEntry::Match::AnyNext;
    } else if (match == "prompt_contains") {
      entry.match = ScriptEntry::Match::PromptContains;
      if (!item["contains"] || !item["contains"].IsScalar()) {
        throw ScriptParseError(line, "prompt_contains entry needs a 'contains' string");
      }
      entry.contains = item["contains"].as<std::string>();
    } else {
      throw ScriptParseError(line, "unknown match '" + match + "'");
    }
    if (!item["response"] || !item["response"].IsScalar()) {
      throw ScriptParseError(line, "entry needs a 'response' string");
    }
    entry.response = item["response"].as<std::string>();
    entries.push_back(std::move(entry));
  }
  return entries;
}

ScriptedModel parse_script(std::string_view text) { return ScriptedModel(parse_script_entries(text)); }

ScriptedModel load_script(const std::filesystem::path &path) {
  const auto text = util::read_file(path);
  if (!text) {
    throw ScriptParseError(0, "cannot read " + path.string());
  }
  return parse_script(*text);
}

namespace {

// Literal blocks read best but cannot carry every string (leading blanks, no final newline).
bool survives_literal(const std::string &text) {
  YAML::Emitter probe;
  probe << YAML::BeginMap << YAML::Key << "r" << YAML::Value << YAML::Literal << text << YAML::EndMap;
  try {
    return YAML::Load(std::string(probe.c_str()) + "\n")["r"].as<std::string>() == text;
  } catch (const YAML::Exception &) {
    return false;
  }
}

} // namespace

std::string dump_script(const std::vector<ScriptEntry> &entries) {
  YAML::Emitter out;
  out << YAML::BeginSeq;
  for (const auto &e : entries) {
    out << YAML::BeginMap;
    if (e.match == ScriptEntry::Match::PromptContains) {
      out << YAML::Key << "match" << YAML::Value << "prompt_contains";
      out << YAML::Key << "contains" << YAML::Value << e.contains;
    } else {
      out << YAML::Key << "match" << YAML::Value << "any";
    }
    out << YAML::Key << "response" << YAML::Value;
    if (survives_literal(e.response)) {
      out << YAML::Literal << e.response;
    } else {
      out << YAML::DoubleQuoted << e.response;
    }
    out << YAML::EndMap;
  }
  out << YAML::EndSeq;
  return std::string(out.c_str()) + "\n";
}

std::vector<std::chrono::milliseconds> backoff_schedule(int retry_limit, std::chrono::milliseconds base_delay) {
  std::vector<std::chrono::milliseconds> delays;
  auto delay = base_delay;
  for (int i = 0; i < retry_limit; ++i) {
    delays.push_back(delay);
    delay *= 2;
  }
  return delays;
}

json chat_request_body(const ModelRequest &request) {
  json body;
  body["model"] = request.model_id;
  body["temperature"] = request.temperature;
  body["messages"] = json::array();
  for (const auto &m : request.messages) {
    body["messages"].push_back({{"role", to_string(m.role)}, {"content", m.content}});
  }
  return body;
}

ModelResponse parse_chat_response(std::string_view body) {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::parse_error &) {
    throw GatewayError(GatewayError::Kind::ProtocolError, "response body is not JSON");
  }
  if (!j.contains("choices") || !j["choices"].is_array() || j["choices"].empty()) {
    throw GatewayError(GatewayError::Kind::ProtocolError, "response has no choices");
  }
  const auto &choice = j["choices"][0];
  ModelResponse response;
  if (choice.contains("message") && choice["message"].contains("content") &&
      choice["message"]["content"].is_string()) {
    response.text = choice["message"]["content"].get<std::string>();
  }
  const auto finish = choice.value("finish_reason", std::string("stop"));
  if (finish == "stop") {
    response.finish_reason = FinishReason::Stop;
  } else if (finish == "length") {
    response.finish_reason = FinishReason::Length;
  } else {
    response.finish_reason = FinishReason::Other;
    response.finish_detail = finish;
  }
  return response;
}

LiveBackend::LiveBackend(LiveOptions options) : options_(std::move(options)) {
  if (!options_.sleeper) {
    options_.sleeper = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
  }
}

namespace {

struct Endpoint {
  std::string scheme_host_port;
  std::string path;
};

Endpoint split_base_url(const std::string &base_url) {
  const auto scheme_end = base_url.find("://");
  const auto host_start = scheme_end == std::string::npos ? 0 : scheme_end + 3;
  const auto path_start = base_url.find('/', host_start);
  Endpoint ep;
  ep.scheme_host_port = base_url.substr(0, path_start);
  std::string prefix = path_start == std::string::npos ? "" : base_url.substr(path_start);
  while (!prefix.empty() && prefix.back() == '/') {
    prefix.pop_back();
  }
  if (prefix.size() >= 3 && prefix.compare(prefix.size() - 3, 3, "/v1") == 0) {
    prefix.resize(prefix.size() - 3);
  }
  ep.path = prefix + kChatCompletionsPath;
  return ep;
}

bool is_transient_status(int status) { return status == 429 || (status >= 500 && status <= 599); }

} // namespace

ModelResponse LiveBackend::complete(const ModelRequest &request) {
  validate(request);
  const auto endpoint = split_base_url(options_.base_url);
  const auto body = chat_request_body(request).dump(-1, ' ', false, json::error_handler_t::replace);
  const auto delays = backoff_schedule(options_.retry_limit, options_.base_delay);
  last_attempts_ = 0;
  last_delays_.clear();

  std::string last_failure = "no attempt made";
  for (int attempt = 0; attempt <= options_.retry_limit; ++attempt) {
    if (attempt > 0) {
      const auto delay = delays[static_cast<std::size_t>(attempt - 1)];
      last_delays_.push_back(delay);
      options_.sleeper(delay);
    }
    ++last_attempts_;
    httplib::Client client(endpoint.scheme_host_port);
    client.set_connection_timeout(std::chrono::duration_cast<std::chrono::seconds>(options_.timeout).count());
    client.set_read_timeout(std::chrono::duration_cast<std::chrono::seconds>(options_.timeout).count());
    httplib::Headers headers;
    if (!options_.api_key.empty()) {
      headers.emplace("Authorization", "Bearer " + options_.api_key);
    }
    const auto start = util::steady_clock_ms();
    auto res = client.Post(endpoint.path, headers, body, "application/json");
    if (!res) {
      last_failure = "connection failed: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status == 401 || res->status == 403) {
      throw GatewayError(GatewayError::Kind::AuthRejected,
                         "endpoint rejected credentials (HTTP " + std::to_string(res->status) + ")");
    }
    if (is_transient_status(res->status)) {
      last_failure = "HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status < 200 || res->status > 299) {
      throw GatewayError(GatewayError::Kind::BadRequest,
                         util::scrub("HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 512),
                                     options_.api_key));
    }
    auto response = parse_chat_response(res->body);
    response.latency_ms = util::steady_clock_ms() - start;
    if (request.max_response_chars > 0 && response.text.size() > request.max_response_chars) {
      response.text.resize(util::utf8_floor(response.text, request.max_response_chars));
      response.finish_reason = FinishReason::Length;
    }
    return response;
  }
  throw GatewayError(GatewayError::Kind::EndpointUnreachable,
                     util::scrub("endpoint unreachable after " + std::to_string(last_attempts_) +
                                     " attempts: " + last_failure,
                                 options_.api_key));
}

ModelResponse RecordingBackend::complete(const ModelRequest &request) {
  auto response = inner_.complete(request);
  recorded_.push_back(ScriptEntry{ScriptEntry::Match::AnyNext, {}, response.text});
  return response;
}

} // namespace forgeloop::llm
