#include "mentalmad/cli.hpp"

#include <iostream>

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return mentalmad::cli::run(args, mentalmad::cli::Services{}, std::cout, std::cerr);
}
