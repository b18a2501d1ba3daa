// Copyright 2026 The SBR-CNN Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "sbr/cli.hpp"

int main(int argc, char** argv) { return sbr::run_cli(argc, argv, std::cout, std::cerr); }
