#include <iostream>
#include <string>
#include <vector>

#include "aalb/cli.hpp"

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv + 1, argv + argc);
  return aalb::run(args, std::cout, std::cerr);
}
