#include <string>
#include <vector>

#include "demvae/cli.hpp"

int main(int argc, char** argv) {
  return demvae::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
