#include <iostream>

#include "tdid/cli.hpp"

int main(int argc, char** argv) {
    return tdid::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
