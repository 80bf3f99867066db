#include "qid/cli/commands.hpp"

int main(int argc, char** argv) { return qid::run_cli(std::vector<std::string>(argv + 1, argv + argc)); }
