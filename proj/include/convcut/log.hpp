#pragma once

#include <functional>
#include <string_view>

namespace convcut {

using WarningHandler = std::function<void(std::string_view)>;

// Non-fatal diagnostics go through here. The default handler prints
// "warning: ..." to stderr. Returns the previous handler.
WarningHandler set_warning_handler(WarningHandler handler);
void warn(std::string_view message);

}  // namespace convcut
