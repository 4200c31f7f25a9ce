#include <iostream>

#include "ctrlgen/cli.hpp"

int main(int argc, char** argv) {
  return ctrlgen::cli::run({argv + 1, argv + argc}, std::cout, std::cerr);
}
