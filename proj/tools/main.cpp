#include "repmech/cli.hpp"

int main(int argc, char** argv) { return repmech::cli_main(argc, argv); }
