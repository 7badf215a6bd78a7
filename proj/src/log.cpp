#include "convcut/log.hpp"

#include <iostream>

namespace convcut {

namespace {
WarningHandler& handler() {
  static WarningHandler h = [](std::string_view msg) { std::cerr << "warning: " << msg << '\n'; };
  return h;
}
}  // namespace

WarningHandler set_warning_handler(WarningHandler h) {
  WarningHandler previous = std::move(handler());
  handler() = std::move(h);
  return previous;
}

void warn(std::string_view message) {
  if (handler()) handler()(message);
}

}  // namespace convcut
