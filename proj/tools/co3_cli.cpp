#include <iostream>

#include "co3/cli.hpp"

int main(int argc, char** argv) {
  return co3::run_cli({argv + 1, argv + argc}, std::cin, std::cout, std::cerr);
}
