#include "dynprop/cli.hpp"

int main(int argc, char** argv) { return dynprop::run_cli(argc, argv); }
