#include <iostream>
#include <string>
#include <vector>

#include "whisq/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return whisq::cli::run(args, std::cout, std::cerr);
}
