#include "dcnet/cli.hpp"

int main(int argc, char** argv) {
    return dcnet::cli::cli_main(argc, argv);
}
