#include <malloc.h>

#include <iostream>
#include <string>
#include <vector>

#include "sineseg/cli.hpp"

int main(int argc, char** argv) {
  // Activation buffers are large and short-lived; keep them on the heap
  // instead of paying an mmap/munmap round trip per layer.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  std::vector<std::string> args(argv + 1, argv + argc);
  return sineseg::run_cli(args, std::cout, std::cerr);
}
