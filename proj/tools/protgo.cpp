#include "protgo/cli.hpp"

int main(int argc, char** argv) { return protgo::cli::run(argc, argv); }
