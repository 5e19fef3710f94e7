#include "ldm/cli.hpp"

int main(int argc, char** argv) { return ldm::run(argc, argv); }
