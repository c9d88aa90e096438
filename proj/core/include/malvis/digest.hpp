#pragma once

#include <cstdint>
#include <span>
#include <string>

namespace malvis {

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

/// Lowercase hex SHA-256.
std::string sha256_hex(std::span<const std::uint8_t> bytes);

}  // namespace malvis
