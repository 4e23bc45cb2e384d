#include "rrg/cli.hpp"

int main(int argc, char** argv) { return rrg::cli::run_main(argc, argv); }
