#include "sceneiqa/cli.hpp"

int main(int argc, char** argv) { return sceneiqa::cli::run(argc, argv); }
