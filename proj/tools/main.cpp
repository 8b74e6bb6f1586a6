#include <string>
#include <vector>

#include "weightspace/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return weightspace::cli::run(args);
}
