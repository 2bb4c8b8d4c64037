// Copyright 2026 The FAAR-NVFP4 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "faar/micronet.hpp"

namespace faar::cli {

/// Process exit codes. Errors are also reported as one JSON object on stderr:
///   {"error": "<kind>", "message": "...", "exit_code": N}
enum ExitCode : int {
  kOk = 0,
  kUsage = 2,         // bad flags or unknown subcommand
  kConfig = 3,        // config file or flag values rejected
  kIo = 4,            // unreadable, malformed or unwritable files
  kInvalidInput = 5,  // inputs that violate an operation's preconditions
  kNumerical = 6,     // optimization diverged
  kValidation = 7,    // exported weights failed their checks
  kInternal = 8,
};

/// Runs one subcommand. `args` excludes the program name.
int cli_dispatch(std::span<const std::string> args, std::ostream& out, std::ostream& err);

/// Model manifest: {"format": "faar-micronet", "layers": [{"name", "weights"}]},
/// weight paths relative to the manifest's directory.
struct ModelFiles {
  MicroNet net;
  std::vector<std::filesystem::path> weight_paths;
};

ModelFiles load_model(const std::filesystem::path& manifest);

}  // namespace faar::cli
