#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace malvis {

using Bytes = std::vector<std::uint8_t>;
using ByteView = std::span<const std::uint8_t>;

enum class Origin : std::uint8_t { base, packed, morphed };
enum class SectionKind : std::uint8_t { code = 0, data = 1, resource = 2 };

std::string_view to_string(Origin o) noexcept;
Origin origin_from_string(std::string_view s);
std::string_view to_string(SectionKind k) noexcept;

using Magic = std::array<std::uint8_t, 4>;
inline constexpr Magic kContainerMagic{'M', 'V', 'X', '1'};
inline constexpr Magic kPackedMagic{'M', 'V', 'X', 'P'};

/// magic(4) + section_count(2) + flags(2)
inline constexpr std::size_t kHeaderFixedSize = 8;
/// kind(1) + length(4) per section table entry
inline constexpr std::size_t kSectionEntrySize = 5;

namespace flags {
inline constexpr std::uint16_t packed_stub_present = 1u << 0;
inline constexpr std::uint16_t has_code_section = 1u << 1;
}  // namespace flags

struct Header {
  Magic magic = kContainerMagic;
  std::uint16_t flags = 0;

  bool operator==(const Header&) const = default;
};

struct Section {
  SectionKind kind = SectionKind::data;
  Bytes bytes;

  bool operator==(const Section&) const = default;
};

// One sample. Section count and declared sizes live implicitly in
// `sections`, so the header can never disagree with them. A `wrapped`
// binary is a foreign file held as a single data section with no header;
// it serializes back to the original bytes.
struct Binary {
  std::string id;
  std::string family;
  std::optional<int> year;
  Origin origin = Origin::base;
  std::optional<std::string> parent_id;

  Header header;
  std::vector<Section> sections;
  Bytes overlay;
  bool wrapped = false;

  std::uint16_t section_count() const noexcept {
    return static_cast<std::uint16_t>(sections.size());
  }
  std::vector<std::uint32_t> declared_sizes() const;
  bool has_code_section() const noexcept;
  bool is_packed() const noexcept { return !wrapped && header.magic == kPackedMagic; }
  std::size_t header_size() const noexcept {
    return wrapped ? 0 : kHeaderFixedSize + kSectionEntrySize * sections.size();
  }
  std::size_t serialized_size() const noexcept;

  bool operator==(const Binary&) const = default;
};

/// Parses a container, or wraps a foreign byte string losslessly.
/// Throws Error("TruncatedInput") when a container declares more bytes than
/// are present.
Binary parse(ByteView bytes);

/// Little-endian header, section table, section bytes, then overlay.
Bytes serialize(const Binary& b);

/// serialize() without the overlay: header, table and section bytes.
Bytes serialize_body(const Binary& b);

/// Header flags consistent with the magic and section kinds.
std::uint16_t derive_flags(const Magic& magic, const std::vector<Section>& sections) noexcept;

/// Throws Error("InvalidBinary") when origin/parent_id or size limits are violated.
void validate(const Binary& b);

Bytes read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, ByteView bytes);

}  // namespace malvis
