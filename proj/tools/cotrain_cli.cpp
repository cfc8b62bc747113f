#include <iostream>

#include "cotrain/cli.hpp"

int main(int argc, char** argv) { return cotrain::run_cli(argc, argv, std::cout, std::cerr); }
