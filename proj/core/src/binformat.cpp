#include "malvis/binformat.hpp"

#include <algorithm>
#include <fstream>
#include <limits>

#include "malvis/error.hpp"

namespace malvis {

std::string_view to_string(Origin o) noexcept {
  switch (o) {
    case Origin::base: return "base";
    case Origin::packed: return "packed";
    case Origin::morphed: return "morphed";
  }
  return "base";
}

Origin origin_from_string(std::string_view s) {
  if (s == "base") return Origin::base;
  if (s == "packed") return Origin::packed;
  if (s == "morphed") return Origin::morphed;
  throw validation_error("BadOrigin", std::string(s));
}

std::string_view to_string(SectionKind k) noexcept {
  switch (k) {
    case SectionKind::code: return "code";
    case SectionKind::data: return "data";
    case SectionKind::resource: return "resource";
  }
  return "data";
}

std::vector<std::uint32_t> Binary::declared_sizes() const {
  std::vector<std::uint32_t> out;
  out.reserve(sections.size());
  for (const auto& s : sections) out.push_back(static_cast<std::uint32_t>(s.bytes.size()));
  return out;
}

bool Binary::has_code_section() const noexcept {
  return std::any_of(sections.begin(), sections.end(),
                     [](const Section& s) { return s.kind == SectionKind::code; });
}

std::size_t Binary::serialized_size() const noexcept {
  std::size_t n = header_size() + overlay.size();
  for (const auto& s : sections) n += s.bytes.size();
  return n;
}

std::uint16_t derive_flags(const Magic& magic, const std::vector<Section>& sections) noexcept {
  std::uint16_t f = 0;
  if (magic == kPackedMagic) f |= flags::packed_stub_present;
  if (std::any_of(sections.begin(), sections.end(),
                  [](const Section& s) { return s.kind == SectionKind::code; })) {
    f |= flags::has_code_section;
  }
  return f;
}

namespace {

std::uint16_t load_u16(const std::uint8_t* p) noexcept {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

std::uint32_t load_u32(const std::uint8_t* p) noexcept {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

void put_u16(Bytes& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xFF));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(Bytes& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

Binary wrap_raw(ByteView bytes) {
  Binary b;
  b.wrapped = true;
  b.sections.push_back(Section{SectionKind::data, Bytes(bytes.begin(), bytes.end())});
  return b;
}

bool has_magic(ByteView bytes) {
  if (bytes.size() < 4) return false;
  Magic m{bytes[0], bytes[1], bytes[2], bytes[3]};
  return m == kContainerMagic || m == kPackedMagic;
}

}  // namespace

Binary parse(ByteView bytes) {
  if (!has_magic(bytes)) return wrap_raw(bytes);
  if (bytes.size() < kHeaderFixedSize) {
    throw validation_error("TruncatedInput",
                           "container header needs " + std::to_string(kHeaderFixedSize) +
                               " bytes, got " + std::to_string(bytes.size()));
  }
  const std::uint8_t* p = bytes.data();
  const std::uint16_t count = load_u16(p + 4);
  const std::uint16_t flag_bits = load_u16(p + 6);
  const std::size_t table_end = kHeaderFixedSize + kSectionEntrySize * count;
  if (bytes.size() < table_end) {
    throw validation_error("TruncatedInput", "section table declares " + std::to_string(count) +
                                                 " entries past end of input");
  }

  // A table naming an unknown section kind is not our container; keep the
  // bytes as a foreign file instead.
  std::vector<std::pair<SectionKind, std::uint32_t>> table;
  table.reserve(count);
  std::uint64_t total = table_end;
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint8_t* e = p + kHeaderFixedSize + kSectionEntrySize * i;
    if (e[0] > static_cast<std::uint8_t>(SectionKind::resource)) return wrap_raw(bytes);
    const std::uint32_t len = load_u32(e + 1);
    table.emplace_back(static_cast<SectionKind>(e[0]), len);
    total += len;
  }
  if (total > bytes.size()) {
    throw validation_error("TruncatedInput", "declared sizes total " + std::to_string(total) +
                                                 " bytes, input has " +
                                                 std::to_string(bytes.size()));
  }

  Binary b;
  b.header.magic = Magic{p[0], p[1], p[2], p[3]};
  b.header.flags = flag_bits;
  std::size_t off = table_end;
  for (const auto& [kind, len] : table) {
    b.sections.push_back(Section{kind, Bytes(p + off, p + off + len)});
    off += len;
  }
  b.overlay.assign(p + off, p + bytes.size());
  return b;
}

Bytes serialize_body(const Binary& b) {
  Bytes out;
  out.reserve(b.serialized_size() - b.overlay.size());
  if (b.wrapped) {
    for (const auto& s : b.sections) out.insert(out.end(), s.bytes.begin(), s.bytes.end());
    return out;
  }
  out.insert(out.end(), b.header.magic.begin(), b.header.magic.end());
  put_u16(out, b.section_count());
  put_u16(out, b.header.flags);
  for (const auto& s : b.sections) {
    out.push_back(static_cast<std::uint8_t>(s.kind));
    put_u32(out, static_cast<std::uint32_t>(s.bytes.size()));
  }
  for (const auto& s : b.sections) out.insert(out.end(), s.bytes.begin(), s.bytes.end());
  return out;
}

Bytes serialize(const Binary& b) {
  Bytes out = serialize_body(b);
  out.insert(out.end(), b.overlay.begin(), b.overlay.end());
  return out;
}

void validate(const Binary& b) {
  if (b.origin != Origin::base && !b.parent_id) {
    throw validation_error("InvalidBinary", "transformed sample '" + b.id + "' has no parent_id");
  }
  if (b.sections.size() > std::numeric_limits<std::uint16_t>::max()) {
    throw validation_error("InvalidBinary", "too many sections in '" + b.id + "'");
  }
  for (const auto& s : b.sections) {
    if (s.bytes.size() > std::numeric_limits<std::uint32_t>::max()) {
      throw validation_error("InvalidBinary", "section larger than 4 GiB in '" + b.id + "'");
    }
  }
  if (b.wrapped && (b.sections.size() != 1 || !b.overlay.empty())) {
    throw validation_error("InvalidBinary", "wrapped sample '" + b.id + "' must be one section");
  }
}

Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw validation_error("MissingFile", path.string());
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, ByteView bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw runtime_error("WriteFailed", path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw runtime_error("WriteFailed", path.string());
}

}  // namespace malvis
