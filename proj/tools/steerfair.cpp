#include "steerfair/cli.hpp"

int main(int argc, char** argv) { return steerfair::cli::run(argc, argv); }
