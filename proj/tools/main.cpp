#include <iostream>
#include <string>
#include <vector>

#include "transfo/cli.hpp"
#include "transfo/util.hpp"

int main(int argc, char** argv) {
    transfo::retain_freed_memory();
    std::vector<std::string> args(argv + 1, argv + argc);
    return transfo::run_cli(args, std::cin, std::cout, std::cerr);
}
