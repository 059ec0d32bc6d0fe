#pragma once

// Command-line front end: argument parsing, strict JSON run configuration,
// and the synth / dims / train / cv / eval / ablate / export-features
// commands. Kept apart from main() so tests can drive it in-process.

#include <iosfwd>
#include <string>
#include <vector>

namespace stnet {

// Executes one command line (program name excluded). Human-readable result
// lines go to `out`, diagnostics and progress to `err`; machine-readable
// results are only ever written to files. Returns the process exit code:
// 0 success, 2 configuration error, 3 data error, 4 numeric failure,
// 5 internal invariant violation.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace stnet
