#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace nudge::csv {

using Row = std::vector<std::string>;

/// RFC-4180 reader: quoted fields, doubled quotes, CRLF or LF line endings.
std::vector<Row> parse(std::string_view text);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view contents);

/// Quotes a field only when it contains a separator, quote or line break.
std::string escape(std::string_view field);
std::string join(const Row& fields);

/// Shortest-exact 17 significant digit rendering used by every numeric writer.
std::string format_double(double value);
/// Strict parse: the whole cell must be a finite number.
bool parse_double(std::string_view cell, double& out);

}  // namespace nudge::csv
