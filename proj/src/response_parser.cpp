#include "forgeloop/response_parser.hpp"

#include "forgeloop/util.hpp"

#include <algorithm>

namespace forgeloop::parser {

namespace {

constexpr std::string_view kFence = "```";

struct Line {
  std::size_t start; // first byte of the line
  std::size_t end;   // one past the last content byte, excluding '\n' and a trailing '\r'
  std::size_t next;  // start of the following line, or text.size()
};

Line line_at(std::string_view text, std::size_t start) {
  const auto nl = text.find('\n', start);
  Line line{};
  line.start = start;
  line.end = nl == std::string_view::npos ? text.size() : nl;
  line.next = nl == std::string_view::npos ? text.size() : nl + 1;
  if (line.end > line.start && text[line.end - 1] == '\r') {
    --line.end;
  }
  return line;
}

bool is_opening_fence(std::string_view content) {
  if (content.substr(0, kFence.size()) != kFence) {
    return false;
  }
  return content.substr(kFence.size()).find('`') == std::string_view::npos;
}

bool is_closing_fence(std::string_view content) {
  if (content.substr(0, kFence.size()) != kFence) {
    return false;
  }
  if (content.size() == kFence.size()) {
    return true;
  }
  const char next = content[kFence.size()];
  return next == ' ' || next == '\t';
}

std::string info_tag_of(std::string_view opening) {
  const auto rest = util::trim(opening.substr(kFence.size()));
  const auto ws = rest.find_first_of(" \t");
  return util::to_lower(ws == std::string::npos ? rest : rest.substr(0, ws));
}

bool is_bash_family(std::string_view tag) {
  return tag == "bash" || tag == "sh" || tag == "shell" || tag == "zsh" || tag == "powershell" ||
         tag == "pwsh" || tag == "ps1";
}

bool is_comment_line(std::string_view trimmed, std::string_view shell_tag) {
  if (shell_tag == "cmd" || shell_tag == "bat" || shell_tag == "batch") {
    return trimmed.substr(0, 2) == "::" || util::starts_with_icase(trimmed, "REM ") ||
           util::to_lower(trimmed) == "rem";
  }
  if (is_bash_family(shell_tag)) {
    return !trimmed.empty() && trimmed.front() == '#';
  }
  return false;
}

} // namespace

TagMap default_tag_map() {
  return {
      {"python", BlockKind::ProgramCode},   {"cmd", BlockKind::ShellCommand},
      {"bash", BlockKind::ShellCommand},    {"powershell", BlockKind::ShellCommand},
      {"sh", BlockKind::ShellCommand},      {"shell", BlockKind::ShellCommand},
  };
}

bool ParsedResponse::has_program_code() const {
  return std::any_of(blocks.begin(), blocks.end(),
                     [](const auto &b) { return b.cls.kind == BlockKind::ProgramCode; });
}

bool ParsedResponse::has_shell_commands() const {
  return std::any_of(blocks.begin(), blocks.end(),
                     [](const auto &b) { return b.cls.kind == BlockKind::ShellCommand; });
}

std::vector<FencedBlock> extract_blocks(std::string_view text) {
  std::vector<FencedBlock> blocks;
  bool inside = false;
  std::size_t open_start = 0;
  std::size_t body_start = 0;
  std::string tag;

  std::size_t pos = 0;
  while (pos < text.size()) {
    const auto line = line_at(text, pos);
    const auto content = text.substr(line.start, line.end - line.start);
    if (!inside) {
      if (is_opening_fence(content)) {
        inside = true;
        open_start = line.start;
        body_start = line.next;
        tag = info_tag_of(content);
      }
    } else if (is_closing_fence(content)) {
      FencedBlock block;
      block.info_tag = std::move(tag);
      block.body = std::string(text.substr(body_start, line.start - body_start));
      block.span = Span{open_start, line.start + kFence.size()};
      block.ordinal = blocks.size();
      blocks.push_back(std::move(block));
      inside = false;
      tag.clear();
    }
    pos = line.next;
  }
  return blocks;
}

BlockClass classify(const FencedBlock &block, const TagMap &tag_map) {
  if (!block.info_tag.empty()) {
    if (const auto it = tag_map.find(block.info_tag); it != tag_map.end()) {
      return BlockClass{it->second, block.info_tag};
    }
  }
  return BlockClass{BlockKind::Unclassified, block.info_tag};
}

std::vector<std::string> split_commands(std::string_view body, std::string_view shell_tag) {
  std::vector<std::string> commands;
  std::size_t pos = 0;
  while (pos < body.size()) {
    const auto line = line_at(body, pos);
    auto trimmed = util::trim(body.substr(line.start, line.end - line.start));
    if (!trimmed.empty() && !is_comment_line(trimmed, shell_tag)) {
      commands.push_back(std::move(trimmed));
    }
    pos = line.next;
  }
  return commands;
}

std::vector<std::string> split_commands(const FencedBlock &block) {
  return split_commands(block.body, block.info_tag);
}

ParsedResponse parse_response(std::string_view text, const ParserConfig &config) {
  ParsedResponse parsed;
  for (auto &block : extract_blocks(text)) {
    auto cls = classify(block, config.tag_map);
    parsed.blocks.push_back(ClassifiedBlock{std::move(block), std::move(cls)});
  }
  parsed.terminal = !parsed.has_program_code() && !parsed.has_shell_commands();

  // Marker lines count only when they start outside every block span.
  std::size_t next_block = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const auto line = line_at(text, pos);
    while (next_block < parsed.blocks.size() && parsed.blocks[next_block].block.span.end <= line.start) {
      ++next_block;
    }
    const bool fenced = next_block < parsed.blocks.size() &&
                        parsed.blocks[next_block].block.span.start <= line.start;
    if (!fenced && util::trim(text.substr(line.start, line.end - line.start)) == config.pause_marker) {
      parsed.human_input_requested = true;
      break;
    }
    pos = line.next;
  }
  return parsed;
}

std::string_view to_string(BlockKind kind) {
  switch (kind) {
  case BlockKind::ProgramCode:
    return "program_code";
  case BlockKind::ShellCommand:
    return "shell_command";
  case BlockKind::Unclassified:
    return "unclassified";
  }
  return "unclassified";
}

} // namespace forgeloop::parser
