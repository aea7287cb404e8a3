#include "stepnft/cli.hpp"

int main(int argc, char** argv) { return stepnft::cli_main(argc, argv); }
