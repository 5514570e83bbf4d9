#include "mdl/cli.hpp"

int main(int argc, char** argv) { return mdl::run_cli(argc, argv); }
