#include "nucprop/cli.hpp"

int main(int argc, char** argv) { return nucprop::cli_main(argc, argv); }
