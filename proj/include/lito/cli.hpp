// Copyright Contributors to the lito project
// SPDX-License-Identifier: Apache-2.0
//
// The `lito` command line: subcommands over the library.
#pragma once

#include "lito/common.hpp"
#include "lito/metrics.hpp"

#include <string>
#include <vector>

namespace lito::cli {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

/// Parses and runs one command line. Errors are printed to stderr and mapped
/// to exit codes: 2 usage/config, 3 I/O or bad file, 4 numeric failure.
int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& args); // args[0] is the program name

/// Compares the views of a dataset directory against same-named renders in
/// `pred_dir` (view_NNN.raw, .rgbd or .png). Chamfer uses surface.pts or
/// the light-field positions of `gt_dir` against points.pts, surface.pts or
/// lightfield.slf in `pred_dir`, when both exist.
metrics::EvalReport evaluate_dirs(const std::string& gt_dir, const std::string& pred_dir);

} // namespace lito::cli
