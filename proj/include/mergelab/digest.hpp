#pragma once

#include "mergelab/checkpoint.hpp"

#include <filesystem>
#include <span>
#include <string>
#include <string_view>

namespace mergelab {

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::string_view text);
std::string file_sha256(const std::filesystem::path & path);

// SHA-256 over tensor names, shapes, dtypes and float32 data; metadata is
// excluded so provenance edits do not change a checkpoint's identity.
std::string content_digest(const checkpoint & c);

} // namespace mergelab
