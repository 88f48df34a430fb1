#include <string>
#include <vector>

#include "drift/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return drift::run_cli(args);
}
