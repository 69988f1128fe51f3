#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace mergelab {

// Shortest decimal text that parses back to the same double.
std::string format_number(double v);
std::string format_optional(const std::optional<double> & v);

struct csv_table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    // Index of a header column, or throws a validation error.
    std::size_t column(const std::string & name) const;
    bool has_column(const std::string & name) const;
};

// Plain comma-separated values without quoting; every row must match the
// header width.
csv_table parse_csv(const std::string & text);
csv_table read_csv(const std::filesystem::path & path);
std::string to_csv(const csv_table & t);

double parse_number(const std::string & cell, const std::string & what);

void write_text_file(const std::filesystem::path & path, const std::string & text);
std::string read_text_file(const std::filesystem::path & path);

} // namespace mergelab
