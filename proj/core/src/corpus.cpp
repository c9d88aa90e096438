#include "malvis/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "malvis/digest.hpp"
#include "malvis/error.hpp"
#include "malvis/lz.hpp"
#include "malvis/obfusc.hpp"
#include "malvis/rng.hpp"

namespace malvis {

void validate(const FamilySpec& spec) {
  auto bad = [&](const std::string& why) {
    throw validation_error("InvalidSpec", "family '" + spec.name + "': " + why);
  };
  if (spec.name.empty()) bad("empty name");
  if (spec.motif.empty()) bad("empty motif");
  if (spec.min_size > spec.max_size) bad("min_size > max_size");
  if (spec.overlay_min > spec.overlay_max) bad("overlay_min > overlay_max");
  if (spec.motif_band_hi < spec.motif_band_lo + spec.motif.size()) bad("motif band narrower than motif");
  if (spec.pack_rate < 0.0 || spec.pack_rate > 1.0) bad("pack_rate outside [0, 1]");
  if (spec.record_stride == 0) bad("record_stride must be positive");
  if (spec.data_lo > spec.data_hi) bad("data_lo > data_hi");
}

namespace {

constexpr std::size_t kHeaderSectionSize = 192;

// Instruction templates of the synthetic code alphabet. 0x100 marks an
// immediate byte drawn from the family's small immediate pool.
constexpr int kImm = 0x100;
const std::vector<std::vector<int>>& instruction_templates() {
  static const std::vector<std::vector<int>> t = {
      {0x31, 0xC0},
      {0x85, 0xC0},
      {0x89, 0xC3},
      {0x89, 0xD1},
      {0x83, 0xC0, 0x01},
      {0x90, 0x90},
      {0x8B, 0x45, kImm},
      {0xE8, kImm, kImm, 0x00, 0x00},
      {0x55, 0x8B, 0xEC},
      {0x5D, 0xC3},
      {0x6A, kImm},
      {0xFF, 0x15, kImm, kImm, 0x40, 0x00},
      {0x74, kImm},
      {0xC7, 0x45, kImm, kImm, 0x00, 0x00, 0x00},
  };
  return t;
}

// Everything about a family that does not vary between samples.
struct FamilyStyle {
  Bytes header_template;
  std::vector<double> cumulative_weights;
  Bytes immediates;
  Bytes record_template;
  Bytes overlay_template;
  std::string words;
};

FamilyStyle make_style(const FamilySpec& spec) {
  Rng rng(spec.style_seed ? spec.style_seed : hash_string(spec.name));
  FamilyStyle s;
  s.header_template.resize(kHeaderSectionSize);
  for (auto& b : s.header_template) {
    b = rng.bernoulli(0.45) ? 0 : static_cast<std::uint8_t>(rng.below(256));
  }
  double total = 0;
  for (std::size_t i = 0; i < instruction_templates().size(); ++i) {
    total += 1.0 + static_cast<double>(rng.below(12));
    s.cumulative_weights.push_back(total);
  }
  for (auto& w : s.cumulative_weights) w /= total;
  for (int i = 0; i < 12; ++i) s.immediates.push_back(static_cast<std::uint8_t>(rng.below(256)));
  const auto span = static_cast<std::uint64_t>(spec.data_hi - spec.data_lo) + 1;
  for (std::size_t i = 0; i < spec.record_stride; ++i) {
    s.record_template.push_back(static_cast<std::uint8_t>(spec.data_lo + rng.below(span)));
  }
  for (int i = 0; i < 32; ++i) s.overlay_template.push_back(static_cast<std::uint8_t>(spec.data_lo + rng.below(span)));
  static constexpr char kAlpha[] = "abcdefghijklmnopqrstuvwxyz";
  for (int w = 0; w < 24; ++w) {
    const auto len = 3 + rng.below(8);
    for (std::uint64_t k = 0; k < len; ++k) s.words.push_back(kAlpha[rng.below(26)]);
    s.words.push_back('\0');
  }
  return s;
}

Bytes gen_code(const FamilyStyle& style, std::size_t len, Rng& rng) {
  Bytes out;
  out.reserve(len + 8);
  const auto& templates = instruction_templates();
  while (out.size() < len) {
    const double u = rng.uniform();
    std::size_t k = 0;
    while (k + 1 < style.cumulative_weights.size() && u >= style.cumulative_weights[k]) ++k;
    for (int b : templates[k]) {
      out.push_back(b == kImm ? style.immediates[rng.below(style.immediates.size())]
                              : static_cast<std::uint8_t>(b));
    }
  }
  out.resize(len);
  return out;
}

Bytes gen_records(const FamilySpec& spec, const FamilyStyle& style, std::size_t len, Rng& rng) {
  Bytes out(len);
  const auto span = static_cast<std::uint64_t>(spec.data_hi - spec.data_lo) + 1;
  for (std::size_t i = 0; i < len; ++i) {
    out[i] = rng.bernoulli(0.8) ? style.record_template[i % spec.record_stride]
                                : static_cast<std::uint8_t>(spec.data_lo + rng.below(span));
  }
  return out;
}

Bytes gen_strings(const FamilyStyle& style, std::size_t len, Rng& rng) {
  Bytes out;
  out.reserve(len);
  while (out.size() < len) {
    if (rng.bernoulli(0.3)) {
      const auto pad = 4 + rng.below(28);
      out.insert(out.end(), pad, 0);
    } else {
      const std::size_t start = rng.below(style.words.size());
      for (std::size_t i = start; i < style.words.size() && out.size() < len; ++i) {
        out.push_back(static_cast<std::uint8_t>(style.words[i]));
        if (style.words[i] == '\0') break;
      }
    }
  }
  out.resize(len);
  return out;
}

// High-entropy payload drawn from the family's data range widened to at
// least 128 values: no repeats for the LZ packer, but a visible tint.
Bytes gen_random(const FamilySpec& spec, std::size_t len, Rng& rng) {
  const std::uint64_t lo = std::min<std::uint64_t>(spec.data_lo, 128);
  const std::uint64_t span = std::max<std::uint64_t>(static_cast<std::uint64_t>(spec.data_hi - lo) + 1, 128);
  Bytes out(len);
  for (auto& b : out) b = static_cast<std::uint8_t>(lo + rng.below(span));
  return out;
}

Bytes gen_overlay(const FamilySpec& spec, const FamilyStyle& style, std::size_t len, Rng& rng) {
  Bytes out(len);
  const auto span = static_cast<std::uint64_t>(spec.data_hi - spec.data_lo) + 1;
  for (std::size_t i = 0; i < len; ++i) {
    out[i] = rng.bernoulli(0.75) ? style.overlay_template[i % style.overlay_template.size()]
                                 : static_cast<std::uint8_t>(spec.data_lo + rng.below(span));
  }
  return out;
}

std::size_t share(std::size_t budget, double fraction) {
  return static_cast<std::size_t>(static_cast<double>(budget) * fraction);
}

Binary generate_one(const FamilySpec& spec, const FamilyStyle& style, std::size_t index,
                    std::uint64_t family_seed) {
  Rng rng(derive_seed(family_seed, std::to_string(index)));
  const std::size_t target = static_cast<std::size_t>(
      rng.range(static_cast<std::int64_t>(spec.min_size), static_cast<std::int64_t>(spec.max_size)));
  const std::size_t overlay_len = spec.overlay_max == 0
                                      ? 0
                                      : static_cast<std::size_t>(rng.range(
                                            static_cast<std::int64_t>(spec.overlay_min),
                                            static_cast<std::int64_t>(spec.overlay_max)));
  const bool packable = spec.prepacked || rng.bernoulli(spec.pack_rate);

  Binary b;
  b.family = spec.name;
  b.id = spec.name + "-" + std::to_string(index);
  if (!spec.years.empty()) b.year = spec.years[rng.below(spec.years.size())];

  const std::size_t n_sections = spec.has_code ? 4 : 3;
  const std::size_t header_size = kHeaderFixedSize + kSectionEntrySize * n_sections;
  if (spec.motif_band_lo < header_size) {
    throw validation_error("InvalidSpec", "family '" + spec.name + "': motif band starts inside the " +
                                              std::to_string(header_size) + "-byte header");
  }

  Bytes hdr = style.header_template;
  for (auto& byte : hdr) {
    if (rng.bernoulli(0.05)) byte = static_cast<std::uint8_t>(rng.below(256));
  }
  const std::size_t motif_at = static_cast<std::size_t>(rng.range(
      static_cast<std::int64_t>(spec.motif_band_lo),
      static_cast<std::int64_t>(spec.motif_band_hi - spec.motif.size())));
  if (motif_at - header_size + spec.motif.size() > hdr.size()) {
    hdr.resize(motif_at - header_size + spec.motif.size());
  }
  std::copy(spec.motif.begin(), spec.motif.end(),
            hdr.begin() + static_cast<std::ptrdiff_t>(motif_at - header_size));

  const std::size_t used = header_size + hdr.size() + overlay_len;
  const std::size_t budget = target > used + 256 ? target - used : 256;
  const double code_share = spec.has_code ? (packable ? 0.45 : 0.10) : 0.0;
  const double data_share = packable ? (spec.has_code ? 0.35 : 0.75) : (spec.has_code ? 0.05 : 0.15);

  b.sections.push_back(Section{SectionKind::data, std::move(hdr)});
  if (spec.has_code) {
    b.sections.push_back(Section{SectionKind::code, gen_code(style, share(budget, code_share), rng)});
  }
  b.sections.push_back(Section{SectionKind::data, gen_records(spec, style, share(budget, data_share), rng)});
  const std::size_t res_len = budget - share(budget, code_share) - share(budget, data_share);
  b.sections.push_back(Section{SectionKind::resource,
                               packable ? gen_strings(style, res_len, rng) : gen_random(spec, res_len, rng)});
  b.overlay = gen_overlay(spec, style, overlay_len, rng);
  b.header.magic = kContainerMagic;
  b.header.flags = derive_flags(b.header.magic, b.sections);

  if (!packable) {
    // Grow the encrypted-looking payload until the packer would refuse it.
    auto& res = b.sections.back().bytes;
    while (true) {
      const Bytes body = serialize_body(b);
      if (lz::compress(body).size() >= body.size()) break;
      const Bytes more = gen_random(spec, 1024, rng);
      res.insert(res.end(), more.begin(), more.end());
    }
  }

  if (spec.prepacked) {
    auto packed = obfusc::pack(b);
    if (!packed.applied()) {
      throw runtime_error("GeneratorFailure", "prepacked family '" + spec.name + "' sample " +
                                                  b.id + " did not pack: " + packed.reason());
    }
    Binary p = std::move(packed.binary());
    p.id = b.id;
    p.origin = Origin::base;
    p.parent_id.reset();
    return p;
  }
  return b;
}

}  // namespace

std::vector<Binary> generate_family(const FamilySpec& spec, std::size_t n, std::uint64_t seed) {
  validate(spec);
  const FamilyStyle style = make_style(spec);
  const std::uint64_t family_seed = derive_seed(seed, "family/" + spec.name);
  std::vector<Binary> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_one(spec, style, i, family_seed));
  return out;
}

namespace {

FamilySpec family(std::string name, std::size_t count, std::size_t min_size, std::size_t max_size,
                  Bytes motif, double pack_rate) {
  FamilySpec s;
  s.name = std::move(name);
  s.count = count;
  s.min_size = min_size;
  s.max_size = max_size;
  s.motif = std::move(motif);
  s.pack_rate = pack_rate;
  return s;
}

}  // namespace

std::vector<FamilySpec> default_family_specs() {
  std::vector<FamilySpec> specs;

  auto worm = family("worm", 320, 6 * 1024, 20 * 1024,
                     {0xDE, 0xAD, 0x57, 0x0A, 0x11, 0xC3, 0x9F, 0x42, 0x7E, 0x01, 0xB8, 0x5C}, 0.30);
  worm.overlay_min = 1024;
  worm.overlay_max = 3072;
  worm.record_stride = 16;
  worm.data_lo = 0x00;
  worm.data_hi = 0x7F;
  worm.years = {2015, 2016};
  specs.push_back(worm);

  auto injector = family("injector", 260, 10 * 1024, 28 * 1024,
                         {0x4A, 0x1E, 0xC7, 0x33, 0x90, 0xE2, 0x08, 0x6D, 0xF1, 0x25, 0xAB, 0x77}, 0.30);
  injector.overlay_min = 512;
  injector.overlay_max = 2048;
  injector.record_stride = 24;
  injector.data_lo = 0x20;
  injector.data_hi = 0xBF;
  injector.years = {2017};
  specs.push_back(injector);

  auto stealer = family("stealer", 200, 16 * 1024, 40 * 1024,
                        {0x13, 0x37, 0xBE, 0xEF, 0x5A, 0xA5, 0x0F, 0xF0, 0x66, 0x99, 0xC0, 0xDE}, 0.25);
  stealer.overlay_min = 2048;
  stealer.overlay_max = 6144;
  stealer.record_stride = 32;
  stealer.data_lo = 0x80;
  stealer.data_hi = 0xFF;
  stealer.years = {2021, 2022};
  specs.push_back(stealer);

  auto flooder = family("flooder", 140, 3 * 1024, 9 * 1024,
                        {0xF0, 0x0D, 0xD0, 0x0B, 0x1F, 0x2E, 0x3D, 0x4C, 0x5B, 0x6A, 0x79, 0x88}, 0.40);
  flooder.has_code = false;
  flooder.overlay_min = 256;
  flooder.overlay_max = 1024;
  flooder.record_stride = 8;
  flooder.data_lo = 0x00;
  flooder.data_hi = 0x3F;
  flooder.years = {2015};
  specs.push_back(flooder);

  auto legacy = family("legacy", 80, 8 * 1024, 24 * 1024,
                       {0x0C, 0xA1, 0x7B, 0xE4, 0x52, 0x3F, 0xD6, 0x81, 0x2A, 0x9C, 0x45, 0xEE}, 1.0);
  legacy.prepacked = true;
  legacy.overlay_min = 4096;
  legacy.overlay_max = 8192;
  legacy.record_stride = 12;
  legacy.data_lo = 0xC0;
  legacy.data_hi = 0xFF;
  legacy.years = {2015};
  specs.push_back(legacy);

  return specs;
}

std::vector<Binary> generate_corpus(const std::vector<FamilySpec>& specs, std::uint64_t seed) {
  std::vector<Binary> out;
  for (const auto& spec : specs) {
    auto fam = generate_family(spec, spec.count, seed);
    out.insert(out.end(), std::make_move_iterator(fam.begin()), std::make_move_iterator(fam.end()));
  }
  return out;
}

namespace {

std::string hex(const Bytes& bytes) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string s;
  for (auto b : bytes) {
    s.push_back(kHex[b >> 4]);
    s.push_back(kHex[b & 0xF]);
  }
  return s;
}

Bytes unhex(const std::string& s, const std::string& ctx) {
  if (s.size() % 2) throw validation_error("InvalidSpec", ctx + ": odd-length hex motif");
  Bytes out;
  for (std::size_t i = 0; i < s.size(); i += 2) {
    const std::string byte = s.substr(i, 2);
    if (byte.find_first_not_of("0123456789abcdefABCDEF") != std::string::npos) {
      throw validation_error("InvalidSpec", ctx + ": bad hex motif");
    }
    out.push_back(static_cast<std::uint8_t>(std::stoul(byte, nullptr, 16)));
  }
  return out;
}

nlohmann::ordered_json spec_to_json(const FamilySpec& s) {
  return {{"name", s.name},
          {"count", s.count},
          {"min_size", s.min_size},
          {"max_size", s.max_size},
          {"motif", hex(s.motif)},
          {"motif_band", {s.motif_band_lo, s.motif_band_hi}},
          {"pack_rate", s.pack_rate},
          {"prepacked", s.prepacked},
          {"has_code", s.has_code},
          {"overlay", {s.overlay_min, s.overlay_max}},
          {"record_stride", s.record_stride},
          {"data_range", {s.data_lo, s.data_hi}},
          {"years", s.years},
          {"style_seed", s.style_seed}};
}

FamilySpec spec_from_json(const nlohmann::json& j) {
  static const std::set<std::string> known = {
      "name",      "count",    "min_size", "max_size",      "motif",      "motif_band", "pack_rate",
      "prepacked", "has_code", "overlay",  "record_stride", "data_range", "years",      "style_seed"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw validation_error("InvalidSpec", "unknown family key '" + key + "'");
  }
  FamilySpec s;
  s.name = j.at("name").get<std::string>();
  s.motif = unhex(j.at("motif").get<std::string>(), s.name);
  s.count = j.value("count", s.count);
  s.min_size = j.value("min_size", s.min_size);
  s.max_size = j.value("max_size", s.max_size);
  if (j.contains("motif_band")) {
    s.motif_band_lo = j.at("motif_band").at(0).get<std::size_t>();
    s.motif_band_hi = j.at("motif_band").at(1).get<std::size_t>();
  }
  s.pack_rate = j.value("pack_rate", s.pack_rate);
  s.prepacked = j.value("prepacked", s.prepacked);
  s.has_code = j.value("has_code", s.has_code);
  if (j.contains("overlay")) {
    s.overlay_min = j.at("overlay").at(0).get<std::size_t>();
    s.overlay_max = j.at("overlay").at(1).get<std::size_t>();
  }
  s.record_stride = j.value("record_stride", s.record_stride);
  if (j.contains("data_range")) {
    s.data_lo = j.at("data_range").at(0).get<std::uint8_t>();
    s.data_hi = j.at("data_range").at(1).get<std::uint8_t>();
  }
  s.years = j.value("years", s.years);
  s.style_seed = j.value("style_seed", s.style_seed);
  validate(s);
  return s;
}

}  // namespace

std::vector<FamilySpec> load_family_specs(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw validation_error("MissingFile", path.string());
  try {
    nlohmann::json j;
    in >> j;
    if (!j.is_array()) throw validation_error("InvalidSpec", path.string() + ": expected a JSON list");
    std::vector<FamilySpec> out;
    for (const auto& e : j) out.push_back(spec_from_json(e));
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw validation_error("InvalidSpec", path.string() + ": " + e.what());
  }
}

std::string family_specs_to_json(const std::vector<FamilySpec>& specs) {
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (const auto& s : specs) j.push_back(spec_to_json(s));
  return j.dump(2) + "\n";
}

void check_manifest(const CorpusManifest& manifest) {
  std::map<std::string, Origin> origin_of;
  for (const auto& e : manifest.entries) {
    if (!origin_of.emplace(e.id, e.origin).second) throw validation_error("DuplicateId", e.id);
  }
  for (const auto& e : manifest.entries) {
    if (e.origin != Origin::base && !e.parent_id) {
      throw validation_error("BadParent", e.id + " is transformed but has no parent_id");
    }
    if (!e.parent_id) continue;
    auto it = origin_of.find(*e.parent_id);
    if (it == origin_of.end()) throw validation_error("BadParent", e.id + " -> " + *e.parent_id + " (missing)");
    if (it->second != Origin::base) {
      throw validation_error("BadParent", e.id + " -> " + *e.parent_id + " (parent is not a base sample)");
    }
  }
}

CorpusManifest read_manifest(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw validation_error("MissingFile", manifest_path.string());
  CorpusManifest m;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ManifestEntry e;
      e.id = j.at("id").get<std::string>();
      e.path = j.at("path").get<std::string>();
      e.family = j.at("family").get<std::string>();
      if (j.contains("year") && !j.at("year").is_null()) e.year = j.at("year").get<int>();
      e.origin = origin_from_string(j.value("origin", std::string("base")));
      if (j.contains("parent_id") && !j.at("parent_id").is_null()) {
        e.parent_id = j.at("parent_id").get<std::string>();
      }
      m.entries.push_back(std::move(e));
    } catch (const nlohmann::json::exception& ex) {
      throw validation_error("BadManifest", manifest_path.string() + ":" + std::to_string(lineno) +
                                                ": " + ex.what());
    }
  }
  return m;
}

void write_manifest(const CorpusManifest& manifest, const std::filesystem::path& manifest_path) {
  std::ostringstream os;
  for (const auto& e : manifest.entries) {
    nlohmann::ordered_json j;
    j["id"] = e.id;
    j["path"] = e.path;
    j["family"] = e.family;
    j["year"] = e.year ? nlohmann::ordered_json(*e.year) : nlohmann::ordered_json(nullptr);
    j["origin"] = std::string(to_string(e.origin));
    j["parent_id"] = e.parent_id ? nlohmann::ordered_json(*e.parent_id) : nlohmann::ordered_json(nullptr);
    os << j.dump() << '\n';
  }
  const std::string s = os.str();
  write_file(manifest_path, ByteView(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

std::vector<Binary> load_corpus(const std::filesystem::path& manifest_path) {
  const CorpusManifest m = read_manifest(manifest_path);
  check_manifest(m);
  const auto root = manifest_path.parent_path();
  std::vector<Binary> out;
  out.reserve(m.entries.size());
  for (const auto& e : m.entries) {
    const auto file = root / e.path;
    if (!std::filesystem::exists(file)) throw validation_error("MissingFile", file.string());
    Binary b = parse(read_file(file));
    b.id = e.id;
    b.family = e.family;
    b.year = e.year;
    b.origin = e.origin;
    b.parent_id = e.parent_id;
    out.push_back(std::move(b));
  }
  return out;
}

namespace {
std::string file_name_for(const std::string& id) {
  std::string s;
  for (char c : id) {
    const bool ok = std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.' || c == '~';
    s.push_back(ok ? c : '_');
  }
  return s + ".bin";
}
}  // namespace

CorpusManifest save_corpus(const std::vector<Binary>& corpus, const std::filesystem::path& dir) {
  CorpusManifest m;
  std::set<std::string> names;
  for (const auto& b : corpus) {
    validate(b);
    ManifestEntry e{b.id, "samples/" + file_name_for(b.id), b.family, b.year, b.origin, b.parent_id};
    if (!names.insert(e.path).second) throw validation_error("DuplicateId", b.id);
    m.entries.push_back(std::move(e));
  }
  check_manifest(m);
  for (std::size_t i = 0; i < corpus.size(); ++i) write_file(dir / m.entries[i].path, serialize(corpus[i]));
  write_manifest(m, dir / kManifestName);
  return m;
}

std::string corpus_digest(const std::vector<Binary>& corpus) {
  Bytes buf;
  for (const auto& b : corpus) {
    for (const std::string* s : {&b.id, &b.family}) {
      buf.insert(buf.end(), s->begin(), s->end());
      buf.push_back(0);
    }
    const auto o = to_string(b.origin);
    buf.insert(buf.end(), o.begin(), o.end());
    buf.push_back(0);
    const Bytes bytes = serialize(b);
    buf.insert(buf.end(), bytes.begin(), bytes.end());
  }
  return sha256_hex(buf);
}

}  // namespace malvis
