// SPDX-License-Identifier: Apache-2.0
#include <iostream>

#include "bigs/cli.hpp"

int main(int argc, char** argv) { return bigs::cli::run(argc, argv, std::cout, std::cerr); }
