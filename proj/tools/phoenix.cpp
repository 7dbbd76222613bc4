#include "phoenix/cli.hpp"

int main(int argc, char** argv) { return phoenix::run_cli(argc, argv); }
