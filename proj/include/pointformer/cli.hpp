#pragma once

// Command-line entry point: train, eval, predict, dump-selections, bench,
// gradcheck, ablation.  Exit codes: 0 ok, 1 runtime error, 2 config
// error, 3 data error.

namespace pf::cli {

int run(int argc, const char* const* argv);

}  // namespace pf::cli
