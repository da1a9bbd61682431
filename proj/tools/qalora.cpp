#include <iostream>

#include "qalora/cli.hpp"

int main(int argc, char** argv) {
    return qalora::cli::run_cli(argc, argv, std::cout, std::cerr);
}
