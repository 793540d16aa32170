#include <string>
#include <vector>

#include "focal3d/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return focal3d::cli::run(std::move(args));
}
