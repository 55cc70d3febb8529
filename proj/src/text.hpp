#pragma once

#include <charconv>
#include <cmath>
#include <cstdio>
#include <string>

namespace ipwsae::detail {

// Quotes a CSV field when it contains a separator, quote or newline.
inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + '"';
}

// %.<digits>g, or NA for non-finite values.
inline std::string fmt(double v, int digits = 10) {
  if (!std::isfinite(v)) return "NA";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

// Shortest text that reads back to the same double, or NA.
inline std::string fmt_exact(double v) {
  if (!std::isfinite(v)) return "NA";
  char buf[40];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace ipwsae::detail
