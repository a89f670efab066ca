#pragma once

#include <cstdio>
#include <string>

namespace fastslow {

/// Shortest-stable text form used in every CSV and JSON report
/// (12 significant digits; identical input gives identical bytes).
inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

}  // namespace fastslow
