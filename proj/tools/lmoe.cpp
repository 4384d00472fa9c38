// Copyright 2026 The lifelong-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "lmoe/cli/cli.hpp"
#include "lmoe/trainer/trainer.hpp"

int main(int argc, char** argv) {
  lmoe::tune_allocator();
  return lmoe::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
