#include "spherebridge/cli.hpp"

int main(int argc, char** argv) { return spherebridge::run_cli(argc, argv); }
