#include "psm/cli.hpp"

int main(int argc, char** argv) { return psm::cli::run(argc, argv); }
