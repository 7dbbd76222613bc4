#pragma once

#include <string>
#include <vector>

namespace phoenix {

// Exit codes of the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitInput = 2;
inline constexpr int kExitRuntime = 3;

// Entry point of the `phoenix` tool. Subcommands: partition, warmup, train,
// generate, evaluate, report. Global flags: --config, --seed, --out, --workers.
// PHOENIX_SEED and PHOENIX_OUT override the config file; flags override both.
int run_cli(int argc, const char* const* argv);
int run_cli(const std::vector<std::string>& args);

}  // namespace phoenix
