#include <iostream>

#include "actdec/cli.hpp"

int main(int argc, char** argv) { return actdec::cli::run(argc, argv, std::cout, std::cerr); }
