#include "csmri/cli.hpp"

int main(int argc, char** argv) { return csmri::cli::run(argc, argv); }
