// Copyright 2026 The lifelong-moe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace lmoe {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

/// Entry point of the `lmoe` tool:
///   train  --config PATH [--out DIR] [--seed N]
///   eval   --checkpoint PATH --dist {A|B|C|spec.json} [--seed N] [--batches N]
///   report RUN_DIR
/// Every command accepts --precision {f32|f64}. Returns the exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace lmoe
