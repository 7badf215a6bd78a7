#include <iostream>
#include <string>
#include <vector>

#include "convcut/cli.hpp"

int main(int argc, char** argv) {
  return convcut::cli_main(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
