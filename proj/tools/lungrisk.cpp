#include <iostream>

#include "lungrisk/cli.hpp"

int main(int argc, char** argv) {
  return lungrisk::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
