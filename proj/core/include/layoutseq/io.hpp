#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace layoutseq {

/// Writes `contents` to a sibling temp file, then renames it over `path`, so
/// readers never observe a partially written file.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

/// Whole file as bytes; throws DataError when unreadable.
std::string read_file(const std::filesystem::path& path);

}  // namespace layoutseq
