#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace forgeloop {

// Raised for any filesystem read/write problem that must abort the current step.
class StorageFailure : public std::runtime_error {
public:
  StorageFailure(std::filesystem::path path, const std::string &cause);
  const std::filesystem::path &path() const noexcept { return path_; }

private:
  std::filesystem::path path_;
};

namespace util {

std::string trim(std::string_view s);
std::string to_lower(std::string_view s);
bool is_blank(std::string_view s);
bool starts_with_icase(std::string_view s, std::string_view prefix);

std::string sha256_hex(std::string_view data);

// Replaces every byte that is not part of a valid UTF-8 sequence with '?'.
// Length is preserved, so byte caps applied before sanitizing still hold.
std::string sanitize_utf8(std::string_view raw);

// Nearest index <= pos that does not split a UTF-8 sequence.
std::size_t utf8_floor(std::string_view s, std::size_t pos);

std::string normalize_newlines(std::string_view s);

// Write-to-temp-then-rename. Throws StorageFailure.
void write_file_atomic(const std::filesystem::path &path, std::string_view content);
// Fails if the path already exists.
void write_file_exclusive(const std::filesystem::path &path, std::string_view content);
std::optional<std::string> read_file(const std::filesystem::path &path);

std::int64_t wall_clock_ms();
std::int64_t steady_clock_ms();
std::string iso8601_utc(std::int64_t epoch_ms);

// Replaces every occurrence of secret in text; no-op for empty secrets.
std::string scrub(std::string text, std::string_view secret,
                  std::string_view replacement = "[redacted]");

} // namespace util
} // namespace forgeloop
