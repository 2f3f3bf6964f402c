#include "kgmark/cli.hpp"

int main(int argc, char** argv) { return kgmark::cli::run(argc, argv); }
