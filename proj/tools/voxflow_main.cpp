#include "voxflow/cli.hpp"

int main(int argc, char** argv) { return voxflow::cli_main(argc, argv); }
