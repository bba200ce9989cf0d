#include "cdbo/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return cdbo::cli::main_entry(argc, argv, std::cout, std::cerr); }
