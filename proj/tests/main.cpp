#define DOCTEST_CONFIG_IMPLEMENT
#include "doctest.h"

#include "dart/tensor.hpp"

int main(int argc, char** argv) {
  dart::tune_allocator();
  doctest::Context ctx(argc, argv);
  return ctx.run();
}
