#pragma once

#include <istream>
#include <string>
#include <string_view>
#include <vector>

namespace stainfuse::csv {

/// Splits one CSV line on commas. Fields are never quoted in the formats
/// this library reads and writes.
std::vector<std::string> split(std::string_view line);

/// Reads the next line without the trailing LF/CRLF. Returns false at EOF.
bool read_line(std::istream& in, std::string& line);

/// Reads and checks the header line; throws ConfigError on mismatch.
void expect_header(std::istream& in, std::string_view expected, std::string_view what);

/// Shortest decimal string that round-trips the double exactly.
std::string format_double(double value);

double parse_double(std::string_view field, std::string_view what);
long long parse_int(std::string_view field, std::string_view what);

}  // namespace stainfuse::csv
