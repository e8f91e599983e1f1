#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace forgeloop::parser {

inline constexpr std::string_view kDefaultPauseMarker = "[AWAIT_HUMAN]";

// Half-open byte interval [start, end) into the raw response text.
struct Span {
  std::size_t start = 0;
  std::size_t end = 0;

  std::size_t size() const noexcept { return end - start; }
  bool operator==(const Span &) const = default;
};

struct FencedBlock {
  std::string info_tag; // lowercased first token after the opening fence, may be empty
  std::string body;     // text between the fence lines, delimiters excluded
  Span span;            // opening fence start through the closing backquotes
  std::size_t ordinal = 0;

  bool operator==(const FencedBlock &) const = default;
};

enum class BlockKind { ProgramCode, ShellCommand, Unclassified };

struct BlockClass {
  BlockKind kind = BlockKind::Unclassified;
  std::string tag;

  bool operator==(const BlockClass &) const = default;
};

using TagMap = std::map<std::string, BlockKind, std::less<>>;

// python -> code; cmd, bash, powershell, sh, shell -> commands.
TagMap default_tag_map();

struct ParserConfig {
  TagMap tag_map = default_tag_map();
  std::string pause_marker = std::string(kDefaultPauseMarker);
};

struct ClassifiedBlock {
  FencedBlock block;
  BlockClass cls;

  bool operator==(const ClassifiedBlock &) const = default;
};

struct ParsedResponse {
  std::vector<ClassifiedBlock> blocks;
  bool human_input_requested = false;
  // No ProgramCode and no ShellCommand blocks.
  bool terminal = true;

  bool has_program_code() const;
  bool has_shell_commands() const;
  bool operator==(const ParsedResponse &) const = default;
};

// Well-formed fenced regions in document order. An opening fence is a line that
// begins with exactly three backquotes followed by an optional tag (no further
// backquotes on the line). A closing fence is a line that begins with exactly
// three backquotes followed by end of line or whitespace. Unclosed fences yield
// nothing. Total over arbitrary bytes.
std::vector<FencedBlock> extract_blocks(std::string_view text);

BlockClass classify(const FencedBlock &block, const TagMap &tag_map);

// One command per non-blank, non-comment line of the block body.
std::vector<std::string> split_commands(const FencedBlock &block);
std::vector<std::string> split_commands(std::string_view body, std::string_view shell_tag);

ParsedResponse parse_response(std::string_view text, const ParserConfig &config = {});

std::string_view to_string(BlockKind kind);

} // namespace forgeloop::parser
