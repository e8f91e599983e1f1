#include "forgeloop/snippet_store.hpp"

#include <system_error>

namespace forgeloop::snippets {

namespace fs = std::filesystem;

std::string extension_for(std::string_view language_tag) {
  if (language_tag == "python") {
    return "py";
  }
  return std::string(language_tag);
}

fs::path latest_relpath(std::string_view language_tag) {
  return fs::path("snippets") / ("latest." + extension_for(language_tag));
}

fs::path archive_relpath(std::string_view language_tag, std::size_t step, std::size_t ordinal) {
  return fs::path("snippets") / "archive" /
         ("step" + std::to_string(step) + "_block" + std::to_string(ordinal) + "." + extension_for(language_tag));
}

namespace {

void ensure_dir(const fs::path &dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) {
    throw StorageFailure(dir, ec.message());
  }
}

void write_archive(const fs::path &path, const std::string &content) {
  if (fs::exists(path)) {
    const auto existing = util::read_file(path);
    if (!existing) {
      throw StorageFailure(path, "archive exists but is unreadable");
    }
    if (*existing != content) {
      throw StorageFailure(path, "archive entry already exists with different content");
    }
    return;
  }
  util::write_file_exclusive(path, content);
}

} // namespace

std::vector<StagedSnippet> stage(const std::vector<parser::ClassifiedBlock> &blocks,
                                 const fs::path &session_dir, std::size_t step) {
  std::vector<StagedSnippet> staged;
  for (const auto &entry : blocks) {
    if (entry.cls.kind != parser::BlockKind::ProgramCode) {
      continue;
    }
    if (staged.empty()) {
      ensure_dir(session_dir / "snippets" / "archive");
    }
    std::string content = entry.block.body;
    if (content.empty() || content.back() != '\n') {
      content.push_back('\n');
    }

    StagedSnippet snippet;
    snippet.source_step = step;
    snippet.source_ordinal = entry.block.ordinal;
    snippet.language_tag = entry.cls.tag;
    snippet.latest_path = latest_relpath(entry.cls.tag);
    snippet.archive_path = archive_relpath(entry.cls.tag, step, entry.block.ordinal);
    snippet.content_hash = util::sha256_hex(content);

    write_archive(session_dir / snippet.archive_path, content);
    util::write_file_atomic(session_dir / snippet.latest_path, content);
    staged.push_back(std::move(snippet));
  }
  return staged;
}

std::optional<std::string> read_latest(std::string_view language_tag, const fs::path &session_dir) {
  const auto path = session_dir / latest_relpath(language_tag);
  std::error_code ec;
  if (!fs::exists(path, ec)) {
    return std::nullopt;
  }
  auto content = util::read_file(path);
  if (!content) {
    throw StorageFailure(path, "unreadable");
  }
  return content;
}

} // namespace forgeloop::snippets
