#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace mfr::csv {

// One CSV line split into fields. Fields may be double-quoted with "" as an
// escaped quote; embedded newlines are not supported. Returns false on an
// unterminated quote.
bool split_line(std::string_view line, std::vector<std::string>& fields);

std::string quote(std::string_view field);

// Lines of a text file with any trailing '\r' stripped.
std::vector<std::string> read_lines(const std::filesystem::path& path);

void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace mfr::csv
