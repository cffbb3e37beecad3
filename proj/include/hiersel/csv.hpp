#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

namespace hiersel {

// Minimal CSV support for the file formats this project reads and writes:
// header required, comma separated, no quoting (ids and numbers only).
struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::optional<std::size_t> column(const std::string& name) const;
    std::size_t require_column(const std::string& name) const; // SchemaError if absent
};

CsvTable read_csv(const std::string& path);
void write_csv(const std::string& path, const CsvTable& table);

// Round-trippable formatting for doubles (17 significant digits).
std::string format_double(double v);
double parse_double(const std::string& s, const std::string& context);

} // namespace hiersel
