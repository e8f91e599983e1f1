#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "forgeloop/config.hpp"
#include "support.hpp"

using namespace forgeloop;
using namespace forgeloop::config;
namespace t = forgeloop::testing;

TEST_CASE("defaults") {
  const auto c = resolve({}, {}, {});
  CHECK(c.max_steps == 30);
  CHECK(c.history_window == 20);
  CHECK(c.console_port == 7466);
  CHECK_FALSE(c.templates_dir.has_value());
  CHECK(c.policy.mode == exec::PolicyMode::AutoRun);
  CHECK(c.policy.timeout_ms == 30000);
}

TEST_CASE("precedence: flags over env over file over defaults") {
  const std::vector<std::string> keys = {"endpoint_url", "model_id", "session_root", "max_steps", "history_window",
                                         "console_port"};
  // Every subset of layers that sets each key; the highest present layer wins.
  for (int mask = 0; mask < 8; ++mask) {
    ConfigLayer flags, env, file;
    for (const auto &key : keys) {
      if (mask & 1) {
        flags[key] = "1";
      }
      if (mask & 2) {
        env[key] = "2";
      }
      if (mask & 4) {
        file[key] = "3";
      }
    }
    const auto c = resolve(flags, env, file);
    const std::string expected = (mask & 1) ? "1" : (mask & 2) ? "2" : (mask & 4) ? "3" : "";
    CAPTURE(mask);
    if (expected.empty()) {
      CHECK(c.max_steps == 30);
      CHECK(c.model_id == "gpt-4-1106-preview");
    } else {
      CHECK(c.endpoint_url == expected);
      CHECK(c.model_id == expected);
      CHECK(c.session_root == expected);
      CHECK(std::to_string(c.max_steps) == expected);
      CHECK(std::to_string(c.history_window) == expected);
      CHECK(std::to_string(c.console_port) == expected);
    }
  }
}

TEST_CASE("env layer reads the documented variables") {
  const std::map<std::string, std::string> vars = {
      {"FORGELOOP_ENDPOINT", "http://127.0.0.1:9"}, {"FORGELOOP_MODEL", "m"}, {"FORGELOOP_MAX_STEPS", "7"},
      {"FORGELOOP_HISTORY_WINDOW", "0"},            {"FORGELOOP_CONSOLE_PORT", "8080"},
      {"FORGELOOP_SESSION_ROOT", ""},
  };
  const auto layer = env_layer([&](const char *name) -> std::optional<std::string> {
    const auto it = vars.find(name);
    return it == vars.end() ? std::nullopt : std::optional<std::string>(it->second);
  });
  CHECK(layer.at("endpoint_url") == "http://127.0.0.1:9");
  CHECK(layer.count("session_root") == 0);
  const auto c = resolve({}, layer, {});
  CHECK(c.max_steps == 7);
  CHECK(c.history_window == 0);
  CHECK(c.console_port == 8080);
}

TEST_CASE("malformed values are rejected") {
  for (const auto &[key, value] : std::vector<std::pair<std::string, std::string>>{
           {"max_steps", "0"},
           {"max_steps", "-3"},
           {"max_steps", "ten"},
           {"max_steps", "5x"},
           {"history_window", "-1"},
           {"console_port", "70000"},
       }) {
    CAPTURE(key);
    CAPTURE(value);
    CHECK_THROWS_AS(resolve({{key, value}}, {}, {}), ConfigError);
  }
}

TEST_CASE("file layer") {
  t::TempDir dir;
  const auto layer = file_layer("endpoint_url: http://x\nsession_root: sessions\nmax_steps: 4\n"
                                "policy:\n  mode: approve_all\n  deny: ['rm *']\n",
                                dir.path());
  CHECK(layer.at("session_root") == (dir / "sessions").string());
  const auto c = resolve({}, {}, layer);
  CHECK(c.endpoint_url == "http://x");
  CHECK(c.max_steps == 4);
  CHECK(c.policy.mode == exec::PolicyMode::ApproveAll);
  CHECK(c.policy.deny == std::vector<std::string>{"rm *"});

  CHECK(file_layer("", dir.path()).empty());
  CHECK_THROWS_AS(file_layer("- a\n- b\n", dir.path()), ConfigError);
  CHECK_THROWS_AS(file_layer("unknown_key: 1\n", dir.path()), ConfigError);
  CHECK_THROWS_AS(file_layer("max_steps: [1]\n", dir.path()), ConfigError);
  CHECK_THROWS_AS(file_layer("a: [\n", dir.path()), ConfigError);
  CHECK_THROWS_AS(load_file_layer(dir / "absent.yaml"), ConfigError);
}

TEST_CASE("policy file referenced from the config file resolves relative to it") {
  t::TempDir dir;
  t::spit(dir / "conf" / "policy.yaml", "mode: rules_only\nallow: ['echo *']\ntimeout_ms: 500\n");
  t::spit(dir / "conf" / "forgeloop.yaml", "policy: policy.yaml\n");
  const auto c = resolve({}, {}, load_file_layer(dir / "conf" / "forgeloop.yaml"));
  CHECK(c.policy.mode == exec::PolicyMode::RulesOnly);
  CHECK(c.policy.allow == std::vector<std::string>{"echo *"});
  CHECK(c.policy.timeout_ms == 500);

  // A policy from a higher layer replaces the lower one wholesale.
  t::spit(dir / "flag_policy.yaml", "mode: approve_all\n");
  const auto over =
      resolve({{"policy_file", (dir / "flag_policy.yaml").string()}}, {}, load_file_layer(dir / "conf" / "forgeloop.yaml"));
  CHECK(over.policy.mode == exec::PolicyMode::ApproveAll);
  CHECK(over.policy.allow.empty());
}

TEST_CASE("parse_policy") {
  const auto p = parse_policy("mode: auto_run\ndeny: ['format *', 're:^del ']\nallow: []\n"
                              "max_output_bytes: 100\nconfine_working_dir: true\n");
  CHECK(p.deny.size() == 2);
  CHECK(p.max_output_bytes == 100);
  CHECK(p.confine_working_dir);
  CHECK(parse_policy("") == exec::PolicySettings{});

  for (const std::string bad : {
           "mode: yolo\n",
           "deny: 'rm *'\n",
           "deny: ['[abc']\n",
           "deny: ['']\n",
           "allow: ['re:(']\n",
           "timeout_ms: 0\n",
           "timeout_ms: soon\n",
           "extra: 1\n",
           "- list\n",
       }) {
    CAPTURE(bad);
    CHECK_THROWS_AS(parse_policy(bad), ConfigError);
  }
}
