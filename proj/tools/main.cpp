#include "slimunet/cli.hpp"

int main(int argc, char** argv) { return slimunet::cli_main(argc, argv); }
