#pragma once

#include "forgeloop/config.hpp"

#include <atomic>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace forgeloop::cli {

enum ExitCode : int {
  kOk = 0,
  kUsageError = 1,       // bad flags or configuration
  kFailed = 2,           // run: session failed; replay/serve: infrastructure
  kMaxStepsReached = 3,  // run only
  kAssertionFailed = 1,  // replay only
};

struct Io {
  std::istream &in;
  std::ostream &out;
  std::ostream &err;
  config::EnvLookup env = config::process_env();
  // serve blocks here until shutdown; defaults to waiting for SIGINT/SIGTERM.
  std::function<void(const std::string &url)> serve_wait;
};

// Full command line including argv[0].
int main_entry(const std::vector<std::string> &args, Io &io);

// Directory holding scenario files when --scenarios-dir is not given.
std::string default_scenarios_dir(const config::EnvLookup &env);

} // namespace forgeloop::cli
