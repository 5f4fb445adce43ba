#include "strainsolve/cli.hpp"

int main(int argc, char** argv) {
  return strainsolve::cli::cli_main(argc, argv);
}
