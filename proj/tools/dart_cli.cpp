#include <iostream>

#include "dart/cli.hpp"
#include "dart/tensor.hpp"

int main(int argc, char** argv) {
  dart::tune_allocator();
  return dart::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
