#include <iostream>

#include "geniedrive/cli/cli.hpp"

int main(int argc, char** argv) { return geniedrive::cli::dispatch(argc, argv, std::cout, std::cerr); }
