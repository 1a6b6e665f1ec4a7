#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace lglab::csv {

// Shortest text that round-trips the double ("%.17g" trimmed). Stable across
// runs, which the byte-identical output guarantee depends on.
std::string format_real(double value);

std::vector<std::string> split(std::string_view line, char sep = ',');

double parse_real(std::string_view field, std::string_view context);
long long parse_int(std::string_view field, std::string_view context);

// Reads every data row; throws ValidationError if the header row differs
// from `expected_header` (when non-empty).
std::vector<std::vector<std::string>> read_rows(
    const std::filesystem::path& path, std::string_view expected_header = {});

}  // namespace lglab::csv
