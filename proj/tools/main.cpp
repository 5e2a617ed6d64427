#include "cli.hpp"

int main(int argc, char** argv) { return xdk::cli::run(argc, argv); }
