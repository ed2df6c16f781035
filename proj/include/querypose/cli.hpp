#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace querypose {

// Exit codes shared by every command.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;  // runtime failure (data, checkpoint, numerics)
inline constexpr int kExitUsage = 2;    // bad arguments or configuration

// Entry point behind the `querypose` executable. `args` excludes the program
// name. Verbs: train, eval, infer, export-attn.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace querypose
