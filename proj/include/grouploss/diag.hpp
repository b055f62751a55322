#pragma once

#include <functional>
#include <iostream>
#include <string>
#include <utility>

namespace grouploss {

// Non-fatal diagnostics (degenerate similarity rows, zero-norm embeddings,
// classes excluded from sampling). Default sink writes to stderr; tests
// install their own handler to capture messages.

using WarningHandler = std::function<void(const std::string&)>;

inline WarningHandler& warning_handler() {
  static WarningHandler handler = [](const std::string& msg) {
    std::cerr << "warning: " << msg << '\n';
  };
  return handler;
}

inline WarningHandler set_warning_handler(WarningHandler h) {
  return std::exchange(warning_handler(), std::move(h));
}

inline void warn(const std::string& msg) { warning_handler()(msg); }

}  // namespace grouploss
