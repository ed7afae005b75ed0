#pragma once

#include <filesystem>
#include <string>

namespace flatopt {

/// Shortest decimal form that parses back to the same double.
std::string format_real(double v);

/// Writes to a sibling temp file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace flatopt
