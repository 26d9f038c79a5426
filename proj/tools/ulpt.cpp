#include "ulpt/cli.hpp"

int main(int argc, char** argv) { return ulpt::cli::run(argc, argv); }
