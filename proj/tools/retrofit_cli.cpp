// SPDX-License-Identifier: Apache-2.0

#include "retrofit/cli.hpp"

int main(int argc, char** argv) { return retrofit::run_cli(argc, argv); }
