#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace permweave {

/// Shared framing for binary files: 4-byte magic, u64 little-endian header length H,
/// H bytes of UTF-8 JSON, then the raw payload. Offsets in headers are relative to the
/// payload start.
struct ContainerView {
    nlohmann::json header;
    std::span<const std::uint8_t> payload;
};

std::vector<std::uint8_t> write_container(std::string_view magic, const nlohmann::json& header,
                                          std::span<const std::uint8_t> payload);

/// Throws FormatError on a bad magic, a header that overruns the buffer, or invalid JSON.
ContainerView read_container(std::span<const std::uint8_t> bytes, std::string_view magic);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace permweave
