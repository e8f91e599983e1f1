#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <system_error>

namespace forgeloop::testing {

namespace fs = std::filesystem;

class TempDir {
public:
  explicit TempDir(const std::string &prefix = "forgeloop-test") {
    std::string tmpl = (fs::temp_directory_path() / (prefix + "-XXXXXX")).string();
    if (::mkdtemp(tmpl.data()) == nullptr) {
      throw std::runtime_error("mkdtemp failed");
    }
    path_ = tmpl;
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir &) = delete;
  TempDir &operator=(const TempDir &) = delete;

  const fs::path &path() const { return path_; }
  fs::path operator/(const std::string &rel) const { return path_ / rel; }

private:
  fs::path path_;
};

inline fs::path fixtures_dir() { return FORGELOOP_TEST_FIXTURES; }
inline fs::path scenarios_dir() { return FORGELOOP_SCENARIOS_DIR; }

inline std::string slurp(const fs::path &p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void spit(const fs::path &p, const std::string &content) {
  fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << content;
}

// Fixed seed unless FORGELOOP_SEED is set.
inline std::mt19937_64 &rng() {
  static std::mt19937_64 gen([] {
    const char *s = std::getenv("FORGELOOP_SEED");
    return s != nullptr ? std::stoull(s) : 20240117ULL;
  }());
  return gen;
}

inline std::size_t uniform(std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng());
}

} // namespace forgeloop::testing
