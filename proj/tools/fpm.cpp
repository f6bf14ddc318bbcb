#include "fpm/cli.hpp"

int main(int argc, char** argv) { return fpm::run_cli(argc, argv); }
