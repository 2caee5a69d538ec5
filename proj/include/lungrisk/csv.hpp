#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace lungrisk {

// Minimal comma-separated table: no quoting, '#' lines ignored, header required.
struct CsvTable {
  std::filesystem::path source;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> line_numbers;  // 1-based, parallel to rows

  std::optional<std::size_t> column(std::string_view name) const;
  std::size_t require_column(std::string_view name) const;
  // "file:line" for error messages.
  std::string where(std::size_t row) const;
};

CsvTable read_csv(const std::filesystem::path& path);
std::vector<std::string> split_fields(std::string_view line, char sep = ',');
std::string_view trim(std::string_view s);

double parse_double(std::string_view text, const std::string& context);
long long parse_int(std::string_view text, const std::string& context);

// Shortest decimal text that reads back to the same double.
std::string format_double(double value);
// Fixed number of decimals.
std::string format_fixed(double value, int decimals);

}  // namespace lungrisk
