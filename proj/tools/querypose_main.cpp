#include <iostream>

#include "querypose/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return querypose::run_cli(args, std::cout, std::cerr);
}
