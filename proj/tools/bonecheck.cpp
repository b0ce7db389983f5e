#include "bonecheck/cli.hpp"

int main(int argc, char** argv) { return bonecheck::run_cli(argc, argv); }
