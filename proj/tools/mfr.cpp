#include <iostream>

#include "mfr/cli.hpp"

int main(int argc, char** argv) { return mfr::dispatch(argc, argv, std::cout, std::cerr); }
