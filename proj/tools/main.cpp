#include <iostream>

#include "saliency/cli.hpp"

int main(int argc, char** argv) { return saliency::cli_main(argc, argv, std::cout, std::cerr); }
