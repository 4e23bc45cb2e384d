#pragma once

#include <string>
#include <vector>

namespace rrg::cli {

// Full command-line entry point; args exclude the program name. Exit codes:
// 0 success, 1 usage, 2 data/format, 3 numerical/training. Errors print to
// stderr as "rrg: [<code>] <message>". The RRG_LOG environment variable
// ("quiet" silences progress chatter on stderr) never affects emitted
// artifacts.
int run(const std::vector<std::string>& args);

int run_main(int argc, char** argv);

} // namespace rrg::cli
