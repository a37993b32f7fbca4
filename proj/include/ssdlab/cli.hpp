#pragma once

#include <iosfwd>
#include <string>

#include <json.hpp>

namespace ssdlab::cli {

/**
 * Full command-line entry point:
 *
 *   ssd-lab <subcommand> --config PATH [--seed U64] [--out PATH]
 *
 * Subcommands: simulate, sweep-fanout, sweep-c, sweep-batch,
 * verify-lossless, construction1. Exit code 0 iff every in-run assertion
 * passed; 2 on configuration/schema errors.
 */
int run(int argc, const char* const* argv);

// Command bodies, callable in-process (tests drive these directly). Each
// validates its configuration strictly: unknown keys are rejected.
void cmd_simulate(const nlohmann::json& config, std::ostream& out);
void cmd_sweep_fanout(const nlohmann::json& config, std::ostream& out);
void cmd_sweep_c(const nlohmann::json& config, std::ostream& out);
void cmd_sweep_batch(const nlohmann::json& config, std::ostream& out);
nlohmann::json cmd_verify_lossless(const nlohmann::json& config);
nlohmann::json cmd_construction1();

/// Replica parallelism cap: SSD_LAB_THREADS, else hardware concurrency.
int max_threads();

}  // namespace ssdlab::cli
