#include <iostream>

#include "badedit/cli.hpp"

int main(int argc, char** argv) { return badedit::cli::run(argc, argv, std::cerr); }
