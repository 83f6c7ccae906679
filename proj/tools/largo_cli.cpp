// SPDX-License-Identifier: Apache-2.0
#include "largo/cli.hpp"

int main(int argc, char** argv) { return largo::cli::run(argc, argv); }
