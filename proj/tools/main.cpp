#include "cli.hpp"

int main(int argc, char** argv) { return labdyn::cli::run(std::vector<std::string>(argv, argv + argc)); }
