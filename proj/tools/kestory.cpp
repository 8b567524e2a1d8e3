#include <iostream>

#include "kestory/cli.hpp"

int main(int argc, char** argv) { return kestory::cli::dispatch(argc, argv, std::cout, std::cerr); }
