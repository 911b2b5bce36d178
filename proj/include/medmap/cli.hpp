#pragma once

namespace medmap {

// Entry point of the `medmap` tool. Returns the process exit status:
// 0 success, 1 usage or validation error, 2 runtime failure.
int cli_main(int argc, const char* const* argv);

}  // namespace medmap
