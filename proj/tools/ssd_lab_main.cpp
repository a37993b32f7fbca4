#include "ssdlab/cli.hpp"

int main(int argc, char** argv) { return ssdlab::cli::run(argc, argv); }
