#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace detcid {

/// Write via a sibling temp file and rename, so readers never see a partial file.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

std::string read_file(const std::filesystem::path& path);

}  // namespace detcid
