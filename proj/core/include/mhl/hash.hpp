#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace mhl {

/// Hex SHA-1 over git's blob framing ("blob <len>\0" + content), so hashes
/// agree with `git hash-object`.
std::string git_blob_hash(std::string_view content);
std::string git_blob_hash_file(const std::filesystem::path& path);

/// Hex SHA-1 of raw bytes.
std::string sha1_hex(std::string_view content);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view content);

}  // namespace mhl
