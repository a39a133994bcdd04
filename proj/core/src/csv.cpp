#include "stainfuse/csv.hpp"

#include <fmt/format.h>

#include <charconv>
#include <cmath>

#include "stainfuse/error.hpp"

namespace stainfuse::csv {

std::vector<std::string> split(std::string_view line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  for (;;) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      fields.emplace_back(line.substr(start));
      return fields;
    }
    fields.emplace_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

bool read_line(std::istream& in, std::string& line) {
  if (!std::getline(in, line)) return false;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return true;
}

void expect_header(std::istream& in, std::string_view expected, std::string_view what) {
  std::string header;
  if (!read_line(in, header)) {
    throw ConfigError(fmt::format("{}: missing header (expected '{}')", what, expected));
  }
  // Tolerate a UTF-8 byte-order mark.
  if (header.size() >= 3 && header.compare(0, 3, "\xEF\xBB\xBF") == 0) header.erase(0, 3);
  if (header != expected) {
    throw ConfigError(
        fmt::format("{}: malformed header '{}' (expected '{}')", what, header, expected));
  }
}

std::string format_double(double value) { return fmt::format("{}", value); }

double parse_double(std::string_view field, std::string_view what) {
  double value = 0.0;
  const auto* end = field.data() + field.size();
  const auto [ptr, ec] = std::from_chars(field.data(), end, value);
  if (ec != std::errc() || ptr != end || field.empty() || !std::isfinite(value)) {
    throw ConfigError(fmt::format("{}: '{}' is not a finite number", what, field));
  }
  return value;
}

long long parse_int(std::string_view field, std::string_view what) {
  long long value = 0;
  const auto* end = field.data() + field.size();
  const auto [ptr, ec] = std::from_chars(field.data(), end, value);
  if (ec != std::errc() || ptr != end || field.empty()) {
    throw ConfigError(fmt::format("{}: '{}' is not an integer", what, field));
  }
  return value;
}

}  // namespace stainfuse::csv
