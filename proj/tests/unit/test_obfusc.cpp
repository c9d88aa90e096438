#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "helpers.hpp"
#include "malvis/corpus.hpp"
#include "malvis/error.hpp"
#include "malvis/obfusc.hpp"

using namespace malvis;
using namespace malvis::obfusc;

namespace {

Binary compressible(const std::string& id, Bytes overlay = {}) {
  Binary b;
  b.id = id;
  b.family = "f";
  b.sections.push_back({SectionKind::code, Bytes(4000, 0x90)});
  b.sections.push_back({SectionKind::data, Bytes(3000, 0x41)});
  b.overlay = std::move(overlay);
  b.header.flags = derive_flags(b.header.magic, b.sections);
  return b;
}

Binary with_code(const std::string& id, Bytes code) {
  Binary b;
  b.id = id;
  b.family = "f";
  b.sections.push_back({SectionKind::data, Bytes{1, 2, 3}});
  b.sections.push_back({SectionKind::code, std::move(code)});
  b.overlay = {0xEE, 0xEE};
  b.header.flags = derive_flags(b.header.magic, b.sections);
  return b;
}

}  // namespace

TEST_CASE("pack keeps the overlay verbatim at the tail") {
  const Bytes ovly{'O', 'V', 'L', 'Y', 'D', 'A', 'T', 'A'};
  const auto r = pack(compressible("a", ovly));
  REQUIRE(r.applied());
  const Bytes out = serialize(r.binary());
  CHECK(Bytes(out.end() - 8, out.end()) == ovly);
  CHECK(Bytes(out.begin(), out.begin() + 4) == Bytes{'M', 'V', 'X', 'P'});
  CHECK(r.binary().origin == Origin::packed);
  CHECK(r.binary().parent_id == std::string("a"));
  CHECK(r.binary().family == "f");
}

TEST_CASE("packing twice is refused") {
  const auto once = pack(compressible("a"));
  REQUIRE(once.applied());
  const auto twice = pack(once.binary());
  CHECK_FALSE(twice.applied());
  CHECK(twice.reason() == kAlreadyPacked);
  // also after a serialize/parse cycle
  CHECK(pack(parse(serialize(once.binary()))).reason() == kAlreadyPacked);
}

TEST_CASE("incompressible bodies are refused") {
  Rng rng(1);
  Binary b;
  b.id = "r";
  b.sections.push_back({SectionKind::data, testutil::random_bytes(rng, 5000)});
  const auto r = pack(b);
  CHECK_FALSE(r.applied());
  CHECK(r.reason() == kIncompressible);
}

TEST_CASE("zero-filled 64 KiB body packs below 1%") {
  Binary b;
  b.id = "z";
  b.sections.push_back({SectionKind::data, Bytes(64 * 1024, 0)});
  const auto r = pack(b);
  REQUIRE(r.applied());
  CHECK(r.binary().sections[0].bytes.size() < 64 * 1024 / 100);
}

TEST_CASE("unpack") {
  const Binary b = compressible("a", {1, 2, 3});
  const auto r = pack(b);
  REQUIRE(r.applied());
  CHECK(serialize(unpack(r.binary())) == serialize(b));
  CHECK(unpack(r.binary()).id == "a");
  CHECK_THROWS_AS(unpack(b), Error);
}

TEST_CASE("property: pack/unpack over 500 seeded binaries") {
  Rng rng(500);
  std::size_t packed = 0;
  for (int i = 0; i < 500; ++i) {
    const Binary b = testutil::random_binary(rng, "p" + std::to_string(i));
    const auto r = pack(b);
    if (!r.applied()) {
      REQUIRE(r.reason() == kIncompressible);
      continue;
    }
    ++packed;
    const Bytes out = serialize(r.binary());
    REQUIRE(Bytes(out.end() - static_cast<std::ptrdiff_t>(b.overlay.size()), out.end()) == b.overlay);
    REQUIRE(serialize(unpack(r.binary())) == serialize(b));
    REQUIRE(unpack(parse(out)).sections == b.sections);
  }
  CHECK(packed > 100);
}

TEST_CASE("substitution table validation and json") {
  CHECK_THROWS_AS(SubstitutionTable({{Bytes{}, Bytes{1}}}), Error);
  CHECK_THROWS_AS(SubstitutionTable({{Bytes{1, 2}, Bytes{3, 4}}, {Bytes{1, 2, 3}, Bytes{4, 5, 6}}}), Error);
  const auto& t = default_substitution_table();
  for (const auto& e : t.entries()) {
    CHECK(e.pattern.size() == e.replacement.size());
    // every replacement is itself a pattern, so morphing never dead-ends
    CHECK(std::any_of(t.entries().begin(), t.entries().end(), [&](auto& o) { return o.pattern == e.replacement; }));
  }
  const auto dir = testutil::temp_dir("table");
  const std::string js = t.to_json();
  write_file(dir / "t.json", ByteView(reinterpret_cast<const std::uint8_t*>(js.data()), js.size()));
  CHECK(SubstitutionTable::from_json_file(dir / "t.json").entries() == t.entries());
}

TEST_CASE("morph applicability") {
  Binary nocode;
  nocode.id = "n";
  nocode.sections.push_back({SectionKind::data, Bytes(100, 0x31)});
  CHECK(morph(nocode, default_substitution_table(), 1, 1).reason() == kNoCodeSection);
  const SubstitutionTable absent({{Bytes{0xAA, 0xBB}, Bytes{0xBB, 0xAA}}});
  CHECK(morph(with_code("c", Bytes(50, 0x90)), absent, 1, 1).reason() == kNoMatches);
}

TEST_CASE("property: morph locality, label stability, determinism") {
  const auto& table = default_substitution_table();
  auto specs = default_family_specs();
  const auto fam = generate_family(specs[0], 40, 3);
  for (const auto& b : fam) {
    const auto r = morph(b, table, 3, 17);
    if (!r.applied()) continue;
    const Binary& m = r.binary();
    REQUIRE(m.family == b.family);
    REQUIRE(m.origin == Origin::morphed);
    REQUIRE(m.parent_id == b.id);
    REQUIRE(m.overlay == b.overlay);
    REQUIRE(m.sections.size() == b.sections.size());
    for (std::size_t s = 0; s < b.sections.size(); ++s) {
      REQUIRE(m.sections[s].kind == b.sections[s].kind);
      REQUIRE(m.sections[s].bytes.size() == b.sections[s].bytes.size());
      if (b.sections[s].kind != SectionKind::code) REQUIRE(m.sections[s].bytes == b.sections[s].bytes);
    }
    REQUIRE(serialize(morph(b, table, 3, 17).binary()) == serialize(m));
  }
}

TEST_CASE("morph changes bytes only at substitution sites (one pass)") {
  const auto& table = default_substitution_table();
  Rng rng(8);
  Bytes code;
  for (int i = 0; i < 400; ++i) {
    const auto& e = table.entries()[rng.below(table.entries().size())];
    code.insert(code.end(), e.pattern.begin(), e.pattern.end());
    code.push_back(0xCC);  // never part of a pattern
  }
  const Binary b = with_code("c", code);
  const auto r = morph(b, table, 1, 5);
  REQUIRE(r.applied());
  const Bytes& out = r.binary().sections[1].bytes;
  std::size_t pos = 0, changed_sites = 0;
  while (pos < code.size()) {
    if (code[pos] == 0xCC) {
      REQUIRE(out[pos] == 0xCC);
      ++pos;
      continue;
    }
    const int k = table.match_at(code, pos);
    REQUIRE(k >= 0);
    const auto& e = table.entries()[static_cast<std::size_t>(k)];
    const Bytes got(out.begin() + static_cast<std::ptrdiff_t>(pos),
                    out.begin() + static_cast<std::ptrdiff_t>(pos + e.pattern.size()));
    REQUIRE((got == e.pattern || got == e.replacement));
    changed_sites += got != e.pattern;
    pos += e.pattern.size();
  }
  // p = 0.5 over 400 sites
  CHECK(changed_sites > 150);
  CHECK(changed_sites < 250);
}

TEST_CASE("morphed three times still parses and stays morphable") {
  const auto fam = generate_family(default_family_specs()[0], 5, 1);
  for (const auto& b : fam) {
    auto r = morph(b, default_substitution_table(), 3, 2);
    REQUIRE(r.applied());
    const Binary again = parse(serialize(r.binary()));
    CHECK(morph(again, default_substitution_table(), 1, 3).applied());
  }
}

TEST_CASE("enhanced training set") {
  auto specs = default_family_specs();
  std::vector<Binary> train;
  for (std::size_t f = 0; f < specs.size(); ++f) {
    auto fam = generate_family(specs[f], 30, 4);
    train.insert(train.end(), fam.begin(), fam.end());
  }
  const auto same = build_enhanced_training_set(train, 0, 0, 1);
  CHECK(same.samples.size() == train.size());

  std::vector<Binary> packable;
  for (int i = 0; i < 10; ++i) packable.push_back(compressible("c" + std::to_string(i)));
  CHECK(build_enhanced_training_set(packable, 1, 0, 1).samples.size() == 20);

  // independent recount of the (0.25, 0.8) case
  const auto e = build_enhanced_training_set(train, 0.25, 0.8, 9);
  std::size_t packed = 0, morphed = 0;
  std::set<std::string> base_ids;
  for (const auto& b : train) base_ids.insert(b.id);
  for (std::size_t i = train.size(); i < e.samples.size(); ++i) {
    const Binary& s = e.samples[i];
    REQUIRE(s.parent_id.has_value());
    REQUIRE(base_ids.count(*s.parent_id));
    packed += s.origin == Origin::packed;
    morphed += s.origin == Origin::morphed;
    const auto& parent = *std::find_if(train.begin(), train.end(), [&](auto& b) { return b.id == *s.parent_id; });
    if (s.origin == Origin::packed) REQUIRE(pack(parent).applied());
    if (s.origin == Origin::morphed) REQUIRE(morph(parent, default_substitution_table(), 1, 0).applied());
  }
  CHECK(packed == e.stats.pack_appended);
  CHECK(morphed == e.stats.morph_appended);
  CHECK(e.stats.pack_selected == static_cast<std::size_t>(std::llround(0.25 * train.size())));
  CHECK(e.stats.morph_selected == static_cast<std::size_t>(std::llround(0.8 * train.size())));
  CHECK(e.stats.pack_appended + e.stats.pack_skipped == e.stats.pack_selected);
  CHECK(e.stats.morph_appended + e.stats.morph_skipped == e.stats.morph_selected);
  for (std::size_t i = 0; i < train.size(); ++i) REQUIRE(serialize(e.samples[i]) == serialize(train[i]));
}

TEST_CASE("conversion report arithmetic") {
  CHECK(percentage_half_up(4, 12) == doctest::Approx(33.33));
  CHECK(percentage_half_up(1, 8) == doctest::Approx(12.5));
  CHECK(percentage_half_up(1, 3) == doctest::Approx(33.33));
  CHECK(percentage_half_up(2, 3) == doctest::Approx(66.67));
  CHECK(percentage_half_up(1, 200) == doctest::Approx(0.5));
  CHECK(percentage_half_up(0, 0) == 0.0);

  std::vector<Binary> base;
  for (int i = 0; i < 12; ++i) {
    Binary b = compressible("a" + std::to_string(i));
    b.family = i < 6 ? "x" : "y";
    base.push_back(b);
  }
  std::vector<Binary> out;
  for (int i = 0; i < 4; ++i) out.push_back(pack(base[static_cast<std::size_t>(i)]).binary());
  const auto r = conversion_report(base, out);
  CHECK(r.overall.total == 12);
  CHECK(r.overall.converted == 4);
  CHECK(r.overall.percentage == doctest::Approx(33.33));
  CHECK(r.per_family.at("x").converted == 4);
  CHECK(r.empty_classes == std::vector<std::string>{"y"});
}

TEST_CASE("synthetic pack rate is reflected in the conversion report") {
  FamilySpec s;
  s.name = "q";
  s.motif = {1, 2, 3, 4};
  s.pack_rate = 0.25;
  const auto fam = generate_family(s, 400, 5);
  std::vector<Binary> out;
  std::size_t recount = 0;
  for (const auto& b : fam) {
    auto r = pack(b);
    if (r.applied()) {
      out.push_back(r.binary());
      ++recount;
    }
  }
  const auto rep = conversion_report(fam, out);
  CHECK(rep.overall.converted == recount);
  CHECK(rep.overall.percentage == doctest::Approx(percentage_half_up(recount, 400)));
  CHECK(std::abs(rep.overall.percentage - 25.0) < 7.0);
}

TEST_CASE("external packer passthrough") {
  const auto dir = testutil::temp_dir("extpack");
  const Binary b = compressible("e", {9, 9});
  // `cp` is a valid (identity) packer: output parses back to the same container
  const auto r = pack_external(b, "cp", dir);
  REQUIRE(r.applied());
  CHECK(r.binary().sections == b.sections);
  CHECK(r.binary().origin == Origin::packed);
  CHECK_FALSE(pack_external(b, "false", dir).applied());
}

TEST_CASE("packed stub hides the original header and motif") {
  const auto spec = default_family_specs()[1];
  for (const auto& b : generate_family(spec, 40, 6)) {
    const auto r = pack(b);
    if (!r.applied()) continue;
    const Bytes& payload = r.binary().sections[0].bytes;
    CHECK(std::search(payload.begin(), payload.end(), spec.motif.begin(), spec.motif.end()) == payload.end());
  }
}
