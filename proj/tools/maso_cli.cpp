#include "maso/cli.hpp"

int main(int argc, char** argv) { return maso::cli::run(argc, argv); }
