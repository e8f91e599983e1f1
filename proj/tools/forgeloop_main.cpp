#include "forgeloop/cli.hpp"

#include <iostream>

int main(int argc, char **argv) {
  std::vector<std::string> args(argv, argv + argc);
  forgeloop::cli::Io io{std::cin, std::cout, std::cerr};
  return forgeloop::cli::main_entry(args, io);
}
