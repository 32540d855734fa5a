#include <iostream>

#include "mmnt/cli.hpp"

int main(int argc, char** argv) { return mmnt::cli::run(argc, argv, std::cout, std::cerr); }
