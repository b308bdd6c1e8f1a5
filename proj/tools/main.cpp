#include <iostream>

#include "nudge/cli.hpp"

int main(int argc, char** argv) { return nudge::cli::run(argc, argv, std::cout, std::cerr); }
