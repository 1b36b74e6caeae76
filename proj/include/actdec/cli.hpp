#pragma once

#include <iosfwd>

namespace actdec::cli {

/// Entry point of the `actdec` command line. Returns the process exit code;
/// diagnostics go to `err` as a single line.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace actdec::cli
