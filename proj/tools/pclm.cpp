#include "pclm/cli.hpp"

int main(int argc, char** argv) { return pclm::cli::run(argc, argv); }
