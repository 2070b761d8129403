#include "cir/cli.hpp"

int main(int argc, char** argv) { return cir::cli::dispatch(argc, argv); }
