#include "medmap/cli.hpp"

int main(int argc, char** argv) { return medmap::cli_main(argc, argv); }
