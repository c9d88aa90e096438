#include "malvis/obfusc.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "malvis/error.hpp"
#include "malvis/lz.hpp"
#include "malvis/rng.hpp"

namespace malvis::obfusc {
namespace {

// Byte-aligned LZ literals would leave the original header readable; real
// packers entropy-code them. A fixed keystream gives the same effect.
void whiten(Bytes& data) {
  Rng ks(0x4D565850ull);
  std::uint64_t word = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (i % 8 == 0) word = ks.next_u64();
    data[i] ^= static_cast<std::uint8_t>(word >> (8 * (i % 8)));
  }
}

}  // namespace

PackResult pack(const Binary& b) {
  if (b.is_packed() || (!b.wrapped && (b.header.flags & flags::packed_stub_present))) {
    return NotApplicable{kAlreadyPacked};
  }
  const Bytes body = serialize_body(b);
  Bytes compressed = lz::compress(body);
  if (compressed.size() >= body.size()) return NotApplicable{kIncompressible};
  whiten(compressed);

  Bytes payload;
  payload.reserve(4 + compressed.size());
  const auto n = static_cast<std::uint32_t>(body.size());
  for (int i = 0; i < 4; ++i) payload.push_back(static_cast<std::uint8_t>((n >> (8 * i)) & 0xFF));
  payload.insert(payload.end(), compressed.begin(), compressed.end());

  Binary out;
  out.id = b.id + "~packed";
  out.family = b.family;
  out.year = b.year;
  out.origin = Origin::packed;
  out.parent_id = b.origin == Origin::base ? b.id : b.parent_id.value_or(b.id);
  out.header.magic = kPackedMagic;
  out.sections.push_back(Section{SectionKind::data, std::move(payload)});
  out.header.flags = derive_flags(out.header.magic, out.sections);
  out.overlay = b.overlay;
  return out;
}

Binary unpack(const Binary& packed) {
  if (!packed.is_packed() || packed.sections.size() != 1 ||
      packed.sections[0].bytes.size() < 4) {
    throw validation_error("NotPacked", "'" + packed.id + "' carries no packer stub");
  }
  const Bytes& payload = packed.sections[0].bytes;
  const std::size_t original = static_cast<std::size_t>(payload[0]) | (payload[1] << 8) |
                               (payload[2] << 16) | (static_cast<std::size_t>(payload[3]) << 24);
  Bytes stream(payload.begin() + 4, payload.end());
  whiten(stream);
  Bytes bytes = lz::decompress(stream, original);
  bytes.insert(bytes.end(), packed.overlay.begin(), packed.overlay.end());

  Binary out = parse(bytes);
  out.family = packed.family;
  out.year = packed.year;
  if (packed.parent_id) {
    out.id = *packed.parent_id;
  } else {
    out.id = packed.id;
  }
  out.origin = Origin::base;
  return out;
}

PackResult pack_external(const Binary& b, const std::string& cmd,
                         const std::filesystem::path& scratch_dir) {
  std::filesystem::create_directories(scratch_dir);
  const auto in = scratch_dir / "packer_in.bin";
  const auto out_path = scratch_dir / "packer_out.bin";
  std::filesystem::remove(out_path);
  write_file(in, serialize(b));
  const std::string line = cmd + " '" + in.string() + "' '" + out_path.string() + "'";
  const int rc = std::system(line.c_str());
  if (rc != 0 || !std::filesystem::exists(out_path)) {
    return NotApplicable{"external packer exit status " + std::to_string(rc)};
  }
  Binary out = parse(read_file(out_path));
  out.id = b.id + "~packed";
  out.family = b.family;
  out.year = b.year;
  out.origin = Origin::packed;
  out.parent_id = b.id;
  return out;
}

SubstitutionTable::SubstitutionTable(std::vector<Substitution> entries)
    : entries_(std::move(entries)), by_first_byte_(256) {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const Bytes& p = entries_[i].pattern;
    if (p.empty()) throw validation_error("InvalidTable", "entry " + std::to_string(i) + " has an empty pattern");
    for (std::size_t j = 0; j < i; ++j) {
      const Bytes& q = entries_[j].pattern;
      const std::size_t common = std::min(p.size(), q.size());
      if (std::equal(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(common), q.begin())) {
        throw validation_error("InvalidTable", "patterns " + std::to_string(j) + " and " +
                                                   std::to_string(i) + " are prefix-related");
      }
    }
    by_first_byte_[p[0]].push_back(static_cast<int>(i));
  }
}

int SubstitutionTable::match_at(ByteView code, std::size_t pos) const noexcept {
  if (pos >= code.size()) return -1;
  for (int idx : by_first_byte_[code[pos]]) {
    const Bytes& p = entries_[static_cast<std::size_t>(idx)].pattern;
    if (pos + p.size() <= code.size() &&
        std::equal(p.begin(), p.end(), code.begin() + static_cast<std::ptrdiff_t>(pos))) {
      return idx;
    }
  }
  return -1;
}

namespace {

Bytes from_hex(const std::string& hex) {
  if (hex.size() % 2 != 0) throw validation_error("InvalidTable", "odd-length hex '" + hex + "'");
  Bytes out;
  for (std::size_t i = 0; i < hex.size(); i += 2) {
    const std::string byte = hex.substr(i, 2);
    if (byte.find_first_not_of("0123456789abcdefABCDEF") != std::string::npos) {
      throw validation_error("InvalidTable", "bad hex '" + hex + "'");
    }
    out.push_back(static_cast<std::uint8_t>(std::stoul(byte, nullptr, 16)));
  }
  return out;
}

std::string to_hex(const Bytes& bytes) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string s;
  for (auto b : bytes) {
    s.push_back(kHex[b >> 4]);
    s.push_back(kHex[b & 0xF]);
  }
  return s;
}

}  // namespace

SubstitutionTable SubstitutionTable::from_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw validation_error("MissingFile", path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw validation_error("InvalidTable", path.string() + ": " + e.what());
  }
  if (!j.is_array()) throw validation_error("InvalidTable", path.string() + ": expected a JSON list");
  std::vector<Substitution> entries;
  for (const auto& e : j) {
    if (!e.contains("pattern") || !e.contains("replacement")) {
      throw validation_error("InvalidTable", path.string() + ": entry lacks pattern/replacement");
    }
    entries.push_back({from_hex(e.at("pattern").get<std::string>()),
                       from_hex(e.at("replacement").get<std::string>())});
  }
  return SubstitutionTable(std::move(entries));
}

std::string SubstitutionTable::to_json() const {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& e : entries_) {
    j.push_back({{"pattern", to_hex(e.pattern)}, {"replacement", to_hex(e.replacement)}});
  }
  return j.dump(2);
}

const SubstitutionTable& default_substitution_table() {
  static const SubstitutionTable table = [] {
    const std::vector<std::pair<Bytes, Bytes>> pairs = {
        {{0x31, 0xC0}, {0x29, 0xC0}},              // xor eax,eax <-> sub eax,eax
        {{0x85, 0xC0}, {0x09, 0xC0}},              // test eax,eax <-> or eax,eax
        {{0x89, 0xC3}, {0x50, 0x5B}},              // mov ebx,eax <-> push eax; pop ebx
        {{0x89, 0xD1}, {0x8B, 0xCA}},              // mov ecx,edx, both encodings
        {{0x83, 0xC0, 0x01}, {0x83, 0xE8, 0xFF}},  // add eax,1 <-> sub eax,-1
        {{0x90, 0x90}, {0x66, 0x90}},              // two nops <-> o16 nop
    };
    std::vector<Substitution> entries;
    for (const auto& [a, b] : pairs) {
      entries.push_back({a, b});
      entries.push_back({b, a});
    }
    return SubstitutionTable(std::move(entries));
  }();
  return table;
}

MorphResult morph(const Binary& b, const SubstitutionTable& table, int passes,
                  std::uint64_t seed) {
  if (passes < 1) throw validation_error("InvalidArgument", "morph passes must be >= 1");
  if (!b.has_code_section() || b.wrapped) return NotApplicable{kNoCodeSection};

  Rng rng(derive_seed(seed, b.id));
  Binary out = b;
  for (int pass = 0; pass < passes; ++pass) {
    std::size_t matches = 0;
    for (auto& section : out.sections) {
      if (section.kind != SectionKind::code) continue;
      const Bytes& code = section.bytes;
      Bytes rewritten;
      rewritten.reserve(code.size());
      std::size_t pos = 0;
      while (pos < code.size()) {
        const int idx = table.match_at(code, pos);
        if (idx < 0) {
          rewritten.push_back(code[pos++]);
          continue;
        }
        ++matches;
        const Substitution& sub = table.entries()[static_cast<std::size_t>(idx)];
        if (rng.bernoulli(kReplaceProbability)) {
          rewritten.insert(rewritten.end(), sub.replacement.begin(), sub.replacement.end());
        } else {
          rewritten.insert(rewritten.end(), sub.pattern.begin(), sub.pattern.end());
        }
        pos += sub.pattern.size();
      }
      section.bytes = std::move(rewritten);
    }
    if (pass == 0 && matches == 0) return NotApplicable{kNoMatches};
  }
  out.id = b.id + "~morphed";
  out.origin = Origin::morphed;
  out.parent_id = b.origin == Origin::base ? b.id : b.parent_id.value_or(b.id);
  out.header.flags = b.header.flags;
  return out;
}

namespace {

std::vector<std::size_t> seeded_subset(std::size_t n, double fraction, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed);
  rng.shuffle(idx);
  const auto take = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  idx.resize(std::min(take, n));
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

EnhancedSet build_enhanced_training_set(const std::vector<Binary>& train, double pack_fraction,
                                        double morph_fraction, std::uint64_t seed,
                                        int morph_passes, const SubstitutionTable& table) {
  if (pack_fraction < 0 || pack_fraction > 1 || morph_fraction < 0 || morph_fraction > 1) {
    throw validation_error("InvalidArgument", "enhancement fractions must lie in [0, 1]");
  }
  EnhancedSet out;
  out.samples = train;
  const auto pack_idx = seeded_subset(train.size(), pack_fraction, derive_seed(seed, "enhance/pack"));
  const auto morph_idx = seeded_subset(train.size(), morph_fraction, derive_seed(seed, "enhance/morph"));

  out.stats.pack_selected = pack_idx.size();
  for (std::size_t i : pack_idx) {
    auto r = pack(train[i]);
    if (r.applied()) {
      out.samples.push_back(std::move(r.binary()));
      ++out.stats.pack_appended;
    } else {
      ++out.stats.pack_skipped;
    }
  }
  out.stats.morph_selected = morph_idx.size();
  const std::uint64_t morph_seed = derive_seed(seed, "enhance/morph-sites");
  for (std::size_t i : morph_idx) {
    auto r = morph(train[i], table, morph_passes, morph_seed);
    if (r.applied()) {
      out.samples.push_back(std::move(r.binary()));
      ++out.stats.morph_appended;
    } else {
      ++out.stats.morph_skipped;
    }
  }
  return out;
}

double percentage_half_up(std::size_t converted, std::size_t total) noexcept {
  if (total == 0) return 0.0;
  // hundredths of a percent: floor((2 * c * 10000 + t) / (2 * t))
  const unsigned long long c = converted, t = total;
  const unsigned long long hundredths = (2ull * c * 10000ull + t) / (2ull * t);
  return static_cast<double>(hundredths) / 100.0;
}

ConversionReport conversion_report(const std::vector<Binary>& base,
                                   const std::vector<Binary>& transformed) {
  ConversionReport report;
  std::map<std::string, std::string> family_of;
  for (const auto& b : base) {
    family_of[b.id] = b.family;
    report.per_family[b.family].total += 1;
  }
  std::set<std::string> converted_parents;
  for (const auto& t : transformed) {
    if (!t.parent_id) continue;
    auto it = family_of.find(*t.parent_id);
    if (it == family_of.end()) continue;
    if (converted_parents.insert(*t.parent_id).second) report.per_family[it->second].converted += 1;
  }
  for (auto& [family, rate] : report.per_family) {
    rate.percentage = percentage_half_up(rate.converted, rate.total);
    report.overall.total += rate.total;
    report.overall.converted += rate.converted;
    if (rate.converted == 0) report.empty_classes.push_back(family);
  }
  report.overall.percentage = percentage_half_up(report.overall.converted, report.overall.total);
  return report;
}

}  // namespace malvis::obfusc
