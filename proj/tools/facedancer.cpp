// SPDX-License-Identifier: Apache-2.0
#include "facedancer/cli.hpp"

int main(int argc, char** argv) { return facedancer::run_cli(argc, argv); }
