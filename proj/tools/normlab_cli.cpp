#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
    CLI::App app{"normlab: normalization-layer laboratory"};
    app.require_subcommand(1);
    // subcommands wired up as the harness lands
    CLI11_PARSE(app, argc, argv);
    std::cout << "normlab\n";
    return 0;
}
