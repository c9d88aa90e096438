#pragma once

#include "malvis/binformat.hpp"

namespace malvis::lz {

// LZ77-family byte compressor used by the packer emulation.
//
// Stream: groups of up to 8 tokens, each group preceded by a flag byte
// (bit i set => token i is a match). A literal is one raw byte. A match is
// LEB128(distance) followed by LEB128(length - kMinMatch); distance is in
// [1, kWindow]. Overlapping matches (distance < length) are allowed.
inline constexpr std::size_t kMinMatch = 4;
inline constexpr std::size_t kWindow = 1u << 16;

Bytes compress(ByteView input);

/// Throws Error("CorruptStream") on malformed input or when the output
/// length differs from `expected_size`.
Bytes decompress(ByteView stream, std::size_t expected_size);

}  // namespace malvis::lz
