#include "fastslow/cli.hpp"

int main(int argc, char** argv) { return fastslow::run_cli(argc, argv); }
