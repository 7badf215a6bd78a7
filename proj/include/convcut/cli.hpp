#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace convcut {

// Entry point behind the convcut executable. args[0] is the program name.
// Help goes to out; diagnostics go to err.
int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace convcut
