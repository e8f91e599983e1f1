#pragma once

#include "forgeloop/response_parser.hpp"
#include "forgeloop/util.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace forgeloop::snippets {

struct StagedSnippet {
  std::size_t source_step = 0;
  std::size_t source_ordinal = 0;
  std::string language_tag;
  std::filesystem::path latest_path;  // relative to the session directory
  std::filesystem::path archive_path; // relative to the session directory
  std::string content_hash;           // sha256 of the staged text

  bool operator==(const StagedSnippet &) const = default;
};

// python -> py, anything else verbatim.
std::string extension_for(std::string_view language_tag);

std::filesystem::path latest_relpath(std::string_view language_tag);
std::filesystem::path archive_relpath(std::string_view language_tag, std::size_t step, std::size_t ordinal);

// Writes every ProgramCode block to snippets/latest.<ext> and to a create-new
// archive file, in ordinal order, before returning. Non-code blocks are skipped.
// A body without a trailing newline gets one. Re-staging identical content into an
// existing archive file is accepted (crash re-run); differing content is a
// StorageFailure.
std::vector<StagedSnippet> stage(const std::vector<parser::ClassifiedBlock> &blocks,
                                 const std::filesystem::path &session_dir, std::size_t step);

std::optional<std::string> read_latest(std::string_view language_tag, const std::filesystem::path &session_dir);

} // namespace forgeloop::snippets
