#include "fewtune/harness.hpp"

int main(int argc, char** argv) {
    return fewtune::cli_main(argc, argv);
}
