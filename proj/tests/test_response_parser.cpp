#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "forgeloop/response_parser.hpp"
#include "oracles.hpp"
#include "support.hpp"

#include <nlohmann/json.hpp>

using namespace forgeloop::parser;
namespace oracle = forgeloop::oracle;
namespace t = forgeloop::testing;

TEST_CASE("extract_blocks: documented examples") {
  CHECK(extract_blocks("plain prose, no fences").empty());

  const std::string one = "before\n```python\nprint(1)\n```\nafter";
  const auto blocks = extract_blocks(one);
  REQUIRE(blocks.size() == 1);
  CHECK(blocks[0].info_tag == "python");
  CHECK(blocks[0].body == "print(1)\n");
  CHECK(blocks[0].span == Span{7, 29});
  CHECK(one.substr(blocks[0].span.start, blocks[0].span.size()) == "```python\nprint(1)\n```");

  // Frozen from the line-scanner oracle.
  const auto unclosed = extract_blocks("```cmd\ndir\n``` then ```python\nx=1\n");
  REQUIRE(unclosed.size() == 1);
  CHECK(unclosed[0].info_tag == "cmd");
  CHECK(unclosed[0].body == "dir\n");
}

TEST_CASE("extract_blocks: fence edge cases") {
  SUBCASE("four backquotes are neither opening nor closing") {
    CHECK(extract_blocks("````\nx\n````\n").empty());
    const auto b = extract_blocks("```\nx\n````\n```\n");
    REQUIRE(b.size() == 1);
    CHECK(b[0].body == "x\n````\n");
  }
  SUBCASE("indented fences are prose") { CHECK(extract_blocks("  ```python\nx\n  ```\n").empty()); }
  SUBCASE("crlf line endings") {
    const auto b = extract_blocks("```Bash\r\nls\r\n```\r\n");
    REQUIRE(b.size() == 1);
    CHECK(b[0].info_tag == "bash");
    CHECK(b[0].body == "ls\r\n");
  }
  SUBCASE("tag keeps only the first token") {
    const auto b = extract_blocks("```  Python  extra words\nx\n```");
    REQUIRE(b.size() == 1);
    CHECK(b[0].info_tag == "python");
  }
  SUBCASE("empty body and closing line with trailing text") {
    const auto b = extract_blocks("```sh\n``` trailing\n");
    REQUIRE(b.size() == 1);
    CHECK(b[0].body.empty());
  }
  SUBCASE("ordinals follow document order") {
    const auto b = extract_blocks("```a\n1\n```\n```b\n2\n```\n```c\n3\n```");
    REQUIRE(b.size() == 3);
    for (std::size_t i = 0; i < b.size(); ++i) {
      CHECK(b[i].ordinal == i);
    }
  }
}

TEST_CASE("classify: examples and full default matrix") {
  const auto map = default_tag_map();
  auto with_tag = [](std::string tag) {
    FencedBlock b;
    b.info_tag = std::move(tag);
    return b;
  };
  CHECK(classify(with_tag("cmd"), map) == BlockClass{BlockKind::ShellCommand, "cmd"});
  CHECK(classify(with_tag("python"), map) == BlockClass{BlockKind::ProgramCode, "python"});
  CHECK(classify(with_tag(""), map) == BlockClass{BlockKind::Unclassified, ""});

  const std::map<std::string, BlockKind> expected = {
      {"python", BlockKind::ProgramCode},   {"cmd", BlockKind::ShellCommand},   {"bash", BlockKind::ShellCommand},
      {"powershell", BlockKind::ShellCommand}, {"sh", BlockKind::ShellCommand}, {"shell", BlockKind::ShellCommand},
  };
  CHECK(map.size() == expected.size());
  for (const auto &[tag, kind] : expected) {
    CAPTURE(tag);
    CHECK(classify(with_tag(tag), map).kind == kind);
    // Tags reach classify lowercased, so upper-case fences classify the same way.
    const auto parsed = parse_response("```" + oracle::lower_ascii(tag) + "\nx\n```\n");
    REQUIRE(parsed.blocks.size() == 1);
    CHECK(parsed.blocks[0].cls.kind == kind);
  }
  for (const std::string tag : {"py", "python3", "js", "text", "console", "zsh", "bat", "json"}) {
    CAPTURE(tag);
    CHECK(classify(with_tag(tag), map) == BlockClass{BlockKind::Unclassified, tag});
  }
  const auto upper = parse_response("```PYTHON\nx\n```\n```PowerShell\ny\n```\n");
  REQUIRE(upper.blocks.size() == 2);
  CHECK(upper.blocks[0].cls.kind == BlockKind::ProgramCode);
  CHECK(upper.blocks[1].cls.kind == BlockKind::ShellCommand);

  TagMap custom{{"js", BlockKind::ProgramCode}, {"zsh", BlockKind::ShellCommand}};
  CHECK(classify(with_tag("js"), custom).kind == BlockKind::ProgramCode);
  CHECK(classify(with_tag("python"), custom).kind == BlockKind::Unclassified);
}

TEST_CASE("split_commands: documented examples") {
  FencedBlock b;
  b.info_tag = "cmd";
  b.body = "dir\n";
  CHECK(split_commands(b) == std::vector<std::string>{"dir"});
  b.body = "echo a\n\necho b\n";
  CHECK(split_commands(b) == std::vector<std::string>{"echo a", "echo b"});
  b.body = ":: comment\ncopy a b\n";
  CHECK(split_commands(b) == std::vector<std::string>{"copy a b"});
}

TEST_CASE("split_commands: reference tokenizer fixture") {
  const auto cases = nlohmann::json::parse(t::slurp(t::fixtures_dir() / "split_commands_cases.json"));
  REQUIRE(cases.size() == 50);
  for (const auto &c : cases) {
    const auto body = c.at("body").get<std::string>();
    const auto shell = c.at("shell").get<std::string>();
    CAPTURE(body);
    CAPTURE(shell);
    CHECK(split_commands(body, shell) == c.at("expected").get<std::vector<std::string>>());
  }
}

TEST_CASE("parse_response: documented examples") {
  const auto prose = parse_response("I have finished the task.");
  CHECK(prose.terminal);
  CHECK_FALSE(prose.human_input_requested);
  CHECK(prose.blocks.empty());

  const auto marker = parse_response("[AWAIT_HUMAN]");
  CHECK(marker.terminal);
  CHECK(marker.human_input_requested);

  const auto mixed = parse_response("```python\nx=1\n```\ntext\n```cmd\npython snippets\\latest.py\n```\n");
  CHECK_FALSE(mixed.terminal);
  REQUIRE(mixed.blocks.size() == 2);
  CHECK(mixed.blocks[0].cls.kind == BlockKind::ProgramCode);
  CHECK(mixed.blocks[1].cls.kind == BlockKind::ShellCommand);
}

TEST_CASE("parse_response: marker exclusivity") {
  CHECK_FALSE(parse_response("```text\n[AWAIT_HUMAN]\n```\n").human_input_requested);
  CHECK_FALSE(parse_response("please [AWAIT_HUMAN] now").human_input_requested);
  CHECK(parse_response("```text\nx\n```\n  [AWAIT_HUMAN]  \n").human_input_requested);
  // An unclosed fence is prose, so a marker after it still counts.
  CHECK(parse_response("```python\nx\n[AWAIT_HUMAN]\n").human_input_requested);

  ParserConfig cfg;
  cfg.pause_marker = "<<HELP>>";
  CHECK(parse_response("<<HELP>>\n", cfg).human_input_requested);
  CHECK_FALSE(parse_response("[AWAIT_HUMAN]\n", cfg).human_input_requested);
}

TEST_CASE("parse_response: unclassified blocks never make a response actionable") {
  const auto r = parse_response("```json\n{}\n```\n```\nplain\n```\n");
  CHECK(r.blocks.size() == 2);
  CHECK(r.terminal);
}

namespace {

void check_against_oracle(const std::string &text) {
  const auto blocks = extract_blocks(text);
  const auto expected = oracle::scan(text);
  REQUIRE(blocks.size() == expected.blocks.size());

  // Partition: gaps and spans tile [0, len) and reassemble the input.
  std::string rebuilt;
  std::size_t cursor = 0;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto &b = blocks[i];
    CHECK(b.ordinal == i);
    CHECK(b.span.start >= cursor);
    CHECK(b.span.end <= text.size());
    CHECK(b.span.start < b.span.end);
    rebuilt += text.substr(cursor, b.span.start - cursor);
    rebuilt += text.substr(b.span.start, b.span.size());
    cursor = b.span.end;

    CHECK(b.span.start == expected.blocks[i].start);
    CHECK(b.span.end == expected.blocks[i].end);
    CHECK(b.info_tag == expected.blocks[i].tag);
    CHECK(b.body == expected.blocks[i].body);
  }
  rebuilt += text.substr(cursor);
  CHECK(rebuilt == text);

  const auto parsed = parse_response(text);
  CHECK(parsed.human_input_requested == expected.marker);
  CHECK(parsed.terminal == (!parsed.has_program_code() && !parsed.has_shell_commands()));
  CHECK(parse_response(text) == parsed);
}

} // namespace

TEST_CASE("partition and oracle agreement over generated responses") {
  std::size_t with_blocks = 0;
  for (int i = 0; i < 2000; ++i) {
    const auto text = oracle::random_response(t::rng());
    CAPTURE(text);
    check_against_oracle(text);
    with_blocks += oracle::scan(text).blocks.empty() ? 0 : 1;
  }
  // The generator should actually produce fenced blocks most of the time.
  CHECK(with_blocks > 500);
}

TEST_CASE("totality over random bytes") {
  for (int i = 0; i < 20000; ++i) {
    const auto text = oracle::random_bytes(t::rng(), 256);
    const auto parsed = parse_response(text);
    for (const auto &b : parsed.blocks) {
      REQUIRE(b.block.span.end <= text.size());
      (void)split_commands(b.block);
    }
  }
  for (int i = 0; i < 200; ++i) {
    check_against_oracle(oracle::random_bytes(t::rng(), 512));
  }
}
