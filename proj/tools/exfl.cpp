#include "echoxflow/cli.hpp"

int main(int argc, char** argv) { return exfl::cli::run(argc, argv); }
