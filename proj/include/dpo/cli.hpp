#pragma once

// Command-line entry point: train, evaluate, oracle, enumerate.
// Exit codes: 0 success, 1 failed check or aborted run, 2 usage or input error.

#include <iosfwd>

namespace dpo {

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace dpo
