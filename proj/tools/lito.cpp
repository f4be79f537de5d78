// Copyright Contributors to the lito project
// SPDX-License-Identifier: Apache-2.0
#include "lito/cli.hpp"

int main(int argc, char** argv) { return lito::cli::run(argc, argv); }
