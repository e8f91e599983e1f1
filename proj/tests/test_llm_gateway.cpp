#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <httplib.h>

#include "forgeloop/executor.hpp"
#include "forgeloop/llm_gateway.hpp"
#include "forgeloop/loop_controller.hpp"
#include "support.hpp"

#include <atomic>
#include <thread>

using namespace forgeloop;
using namespace forgeloop::llm;
namespace t = forgeloop::testing;

namespace {

ModelRequest ask(std::string prompt) {
  ModelRequest r;
  r.messages = {Message{Role::System, "sys"}, Message{Role::User, std::move(prompt)}};
  return r;
}

// Chat endpoint on loopback answering from a queue of (status, body) pairs.
class FakeEndpoint {
public:
  explicit FakeEndpoint(std::vector<std::pair<int, std::string>> replies) : replies_(std::move(replies)) {
    server_.Post(kChatCompletionsPath, [this](const httplib::Request &req, httplib::Response &res) {
      const auto i = hits_++;
      last_auth_ = req.get_header_value("Authorization");
      last_body_ = req.body;
      const auto &r = replies_[std::min(i, replies_.size() - 1)];
      res.status = r.first;
      res.set_content(r.second, "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~FakeEndpoint() {
    server_.stop();
    thread_.join();
  }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }
  std::size_t hits() const { return hits_; }
  std::string last_auth() const { return last_auth_; }
  std::string last_body() const { return last_body_; }

private:
  std::vector<std::pair<int, std::string>> replies_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::atomic<std::size_t> hits_{0};
  std::string last_auth_;
  std::string last_body_;
};

const std::string kOk =
    R"({"choices":[{"message":{"role":"assistant","content":"hello from the model"},"finish_reason":"stop"}]})";

LiveOptions live(const std::string &url, std::vector<std::chrono::milliseconds> *slept) {
  LiveOptions o;
  o.base_url = url;
  o.api_key = "sk-test-SECRET-0001";
  o.timeout = std::chrono::seconds(5);
  o.sleeper = [slept](std::chrono::milliseconds d) { slept->push_back(d); };
  return o;
}

} // namespace

TEST_CASE("scripted: documented examples") {
  ScriptedModel any({{ScriptEntry::Match::AnyNext, "", "done."}});
  const auto r = any.complete(ask("anything"));
  CHECK(r.text == "done.");
  CHECK(r.script_position == 0);
  CHECK(any.cursor() == 1);

  ScriptedModel guarded({{ScriptEntry::Match::PromptContains, "exit 0", "ok"}});
  try {
    guarded.complete(ask("status: ran, exit 1"));
    FAIL("expected ScriptMismatch");
  } catch (const GatewayError &e) {
    CHECK(e.kind() == GatewayError::Kind::ScriptMismatch);
  }
  CHECK(guarded.cursor() == 0);
  CHECK(guarded.complete(ask("status: ran, exit 0")).text == "ok");
}

TEST_CASE("scripted: exhaustion is an error, never a repeat") {
  ScriptedModel m({{ScriptEntry::Match::AnyNext, "", "a"}, {ScriptEntry::Match::AnyNext, "", "b"}});
  CHECK(m.complete(ask("1")).text == "a");
  CHECK(m.complete(ask("2")).text == "b");
  for (int i = 0; i < 3; ++i) {
    try {
      m.complete(ask("3"));
      FAIL("expected ScriptExhausted");
    } catch (const GatewayError &e) {
      CHECK(e.kind() == GatewayError::Kind::ScriptExhausted);
    }
  }
  CHECK(m.remaining() == 0);
}

TEST_CASE("scripted: only the last message is matched") {
  ScriptedModel m({{ScriptEntry::Match::PromptContains, "sys", "x"}});
  CHECK_THROWS_AS(m.complete(ask("user text")), GatewayError);
}

TEST_CASE("requests need messages") {
  ScriptedModel m({{ScriptEntry::Match::AnyNext, "", "a"}});
  CHECK_THROWS_AS(m.complete(ModelRequest{}), std::invalid_argument);
}

TEST_CASE("max_response_chars truncates and reports length") {
  ScriptedModel m({{ScriptEntry::Match::AnyNext, "", "abcdef"}});
  auto req = ask("x");
  req.max_response_chars = 4;
  const auto r = m.complete(req);
  CHECK(r.text == "abcd");
  CHECK(r.finish_reason == FinishReason::Length);
}

TEST_CASE("load_script") {
  t::TempDir dir;
  t::spit(dir / "empty.yaml", "");
  CHECK(load_script(dir / "empty.yaml").entries().empty());

  const auto case1 = load_script(t::scenarios_dir() / "scripts" / "case1.yaml");
  CHECK(case1.entries().size() == 4);
  CHECK(case1.cursor() == 0);

  t::spit(dir / "ok.yaml", "- match: any\n  response: |\n    line one\n    line two\n"
                           "- match: prompt_contains\n  contains: exit 0\n  response: fine\n");
  const auto ok = load_script(dir / "ok.yaml");
  REQUIRE(ok.entries().size() == 2);
  CHECK(ok.entries()[0].response == "line one\nline two\n");
  CHECK(ok.entries()[1].match == ScriptEntry::Match::PromptContains);
  CHECK(ok.entries()[1].contains == "exit 0");

  CHECK_THROWS_AS(load_script(dir / "missing.yaml"), ScriptParseError);
}

TEST_CASE("script parse errors carry line numbers") {
  auto line_of = [](const std::string &text) -> std::size_t {
    try {
      parse_script(text);
    } catch (const ScriptParseError &e) {
      return e.line();
    }
    return 0;
  };
  CHECK(line_of("- match: any\n  response: a\n- match: sometimes\n  response: b\n") == 3);
  CHECK(line_of("- match: any\n  response: a\n- match: prompt_contains\n  response: b\n") == 3);
  CHECK(line_of("- match: any\n") == 1);
  CHECK(line_of("- match: any\n  response: a\n  colour: red\n") == 3);
  CHECK(line_of("match: any\n") == 1);
  CHECK(line_of("- match: any\n  response: [unclosed\n") >= 2);
  CHECK(line_of("- just a string\n") == 1);
}

TEST_CASE("dump_script round-trips") {
  const std::vector<ScriptEntry> entries = {
      {ScriptEntry::Match::AnyNext, "", "```python\nprint('hi')\n```\n"},
      {ScriptEntry::Match::PromptContains, "exit 0", "  leading spaces\nand: colons\n"},
      {ScriptEntry::Match::AnyNext, "", "no trailing newline"},
  };
  const auto back = parse_script_entries(dump_script(entries));
  REQUIRE(back.size() == entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    CHECK(back[i].match == entries[i].match);
    CHECK(back[i].contains == entries[i].contains);
    CHECK(back[i].response == entries[i].response);
  }
}

TEST_CASE("replay determinism: identical response sequences") {
  const auto script = load_script(t::scenarios_dir() / "scripts" / "case1.yaml");
  std::vector<std::string> first;
  std::vector<std::string> second;
  for (auto *out : {&first, &second}) {
    auto m = script;
    while (m.remaining() > 0) {
      out->push_back(m.complete(ask(m.entries()[m.cursor()].contains)).text);
    }
  }
  CHECK(first == second);
}

TEST_CASE("backoff schedule") {
  using ms = std::chrono::milliseconds;
  CHECK(backoff_schedule(3, ms(500)) == std::vector<ms>{ms(500), ms(1000), ms(2000)});
  CHECK(backoff_schedule(0, ms(500)).empty());
  for (int limit = 1; limit < 8; ++limit) {
    const auto s = backoff_schedule(limit, ms(10));
    CHECK(s.size() == static_cast<std::size_t>(limit));
    for (std::size_t i = 1; i < s.size(); ++i) {
      CHECK(s[i] > s[i - 1]);
    }
  }
}

TEST_CASE("wire format") {
  auto req = ask("hi");
  req.model_id = "m-1";
  const auto body = chat_request_body(req);
  CHECK(body["model"] == "m-1");
  CHECK(body["temperature"] == 0.0);
  CHECK(body["messages"][0]["role"] == "system");
  CHECK(body["messages"][1]["content"] == "hi");

  CHECK(parse_chat_response(kOk).text == "hello from the model");
  const auto other = parse_chat_response(R"({"choices":[{"message":{"content":""},"finish_reason":"content_filter"}]})");
  CHECK(other.text.empty());
  CHECK(other.finish_reason == FinishReason::Other);
  CHECK(other.finish_detail == "content_filter");
  CHECK(parse_chat_response(R"({"choices":[{"message":{"content":null},"finish_reason":"length"}]})").finish_reason ==
        FinishReason::Length);
  CHECK_THROWS_AS(parse_chat_response("not json"), GatewayError);
  CHECK_THROWS_AS(parse_chat_response(R"({"choices":[]})"), GatewayError);
}

TEST_CASE("live: success sends the bearer credential") {
  FakeEndpoint ep({{200, kOk}});
  std::vector<std::chrono::milliseconds> slept;
  LiveBackend backend(live(ep.url(), &slept));
  const auto r = backend.complete(ask("hi"));
  CHECK(r.text == "hello from the model");
  CHECK_FALSE(r.script_position.has_value());
  CHECK(ep.last_auth() == "Bearer sk-test-SECRET-0001");
  CHECK(nlohmann::json::parse(ep.last_body())["messages"][1]["content"] == "hi");
  CHECK(backend.attempts_made() == 1);
  CHECK(slept.empty());
}

TEST_CASE("live: base url with a /v1 suffix") {
  FakeEndpoint ep({{200, kOk}});
  std::vector<std::chrono::milliseconds> slept;
  LiveBackend backend(live(ep.url() + "/v1/", &slept));
  CHECK(backend.complete(ask("hi")).text == "hello from the model");
}

TEST_CASE("live: transient failures retry with increasing backoff") {
  FakeEndpoint ep({{429, "{}"}, {503, "{}"}, {200, kOk}});
  std::vector<std::chrono::milliseconds> slept;
  LiveBackend backend(live(ep.url(), &slept));
  CHECK(backend.complete(ask("hi")).text == "hello from the model");
  CHECK(ep.hits() == 3);
  CHECK(slept == std::vector<std::chrono::milliseconds>{std::chrono::milliseconds(500), std::chrono::milliseconds(1000)});
}

TEST_CASE("live: gives up after retry_limit + 1 attempts") {
  FakeEndpoint ep({{500, "{}"}});
  std::vector<std::chrono::milliseconds> slept;
  LiveBackend backend(live(ep.url(), &slept));
  try {
    backend.complete(ask("hi"));
    FAIL("expected EndpointUnreachable");
  } catch (const GatewayError &e) {
    CHECK(e.kind() == GatewayError::Kind::EndpointUnreachable);
  }
  CHECK(ep.hits() == 4);
  CHECK(backend.attempts_made() == 4);
  REQUIRE(slept.size() == 3);
  CHECK(slept[0] < slept[1]);
  CHECK(slept[1] < slept[2]);
}

TEST_CASE("live: auth rejection is not retried") {
  FakeEndpoint ep({{401, R"({"error":"bad key sk-test-SECRET-0001"})"}});
  std::vector<std::chrono::milliseconds> slept;
  LiveBackend backend(live(ep.url(), &slept));
  try {
    backend.complete(ask("hi"));
    FAIL("expected AuthRejected");
  } catch (const GatewayError &e) {
    CHECK(e.kind() == GatewayError::Kind::AuthRejected);
    CHECK(std::string(e.what()).find("SECRET") == std::string::npos);
  }
  CHECK(ep.hits() == 1);
  CHECK(slept.empty());
}

TEST_CASE("live: client errors surface without the credential") {
  FakeEndpoint ep({{400, R"({"error":"echo sk-test-SECRET-0001"})"}});
  std::vector<std::chrono::milliseconds> slept;
  LiveBackend backend(live(ep.url(), &slept));
  try {
    backend.complete(ask("hi"));
    FAIL("expected BadRequest");
  } catch (const GatewayError &e) {
    CHECK(e.kind() == GatewayError::Kind::BadRequest);
    CHECK(std::string(e.what()).find("sk-test-SECRET-0001") == std::string::npos);
  }
}

TEST_CASE("live: unreachable endpoint") {
  std::vector<std::chrono::milliseconds> slept;
  auto o = live("http://127.0.0.1:1", &slept);
  o.retry_limit = 1;
  LiveBackend backend(o);
  try {
    backend.complete(ask("hi"));
    FAIL("expected EndpointUnreachable");
  } catch (const GatewayError &e) {
    CHECK(e.kind() == GatewayError::Kind::EndpointUnreachable);
  }
  CHECK(backend.attempts_made() == 2);
}

TEST_CASE("recording backend keeps every response") {
  ScriptedModel inner({{ScriptEntry::Match::AnyNext, "", "a"}, {ScriptEntry::Match::PromptContains, "z", "b"}});
  RecordingBackend rec(inner);
  rec.complete(ask("x"));
  rec.complete(ask("z"));
  REQUIRE(rec.recorded().size() == 2);
  CHECK(rec.recorded()[1].response == "b");
  CHECK(rec.recorded()[1].match == ScriptEntry::Match::AnyNext);
}

TEST_CASE("credentials never reach the transcript") {
  // Random secrets planted in model text, commands and child output.
  for (int round = 0; round < 20; ++round) {
    std::string secret = "sk-";
    for (int i = 0; i < 24; ++i) {
      secret += static_cast<char>('a' + t::uniform(0, 25));
    }
    t::TempDir dir;
    ::setenv(kApiKeyEnv, secret.c_str(), 1);
    ScriptedModel model({
        {ScriptEntry::Match::AnyNext, "", "The key is " + secret + "\n```bash\necho " + secret +
                                              "\necho \"inherited=$FORGELOOP_API_KEY\"\nprintenv | grep -c " + secret +
                                              " || true\n```\n"},
        {ScriptEntry::Match::AnyNext, "", "done " + secret},
    });
    exec::Executor executor;
    loop::LoopDeps deps;
    deps.model = &model;
    deps.executor = &executor;
    deps.env_facts = {{"os", "Linux"}};
    deps.secrets = {secret};
    loop::SessionOptions opts;
    opts.session_id = "scrub";
    opts.session_dir = dir.path();
    opts.durability = transcript::Durability::Flush;
    auto session = loop::Session::create(opts, deps);
    session->submit_task("print " + secret);
    session->run_until_pause();
    session->close();
    const auto text = t::slurp(dir / loop::kTranscriptFile);
    CHECK(text.find(secret) == std::string::npos);
    CHECK(text.find("[redacted]") != std::string::npos);
    CHECK(text.find("inherited=\\n") != std::string::npos);
    ::unsetenv(kApiKeyEnv);
  }
}
