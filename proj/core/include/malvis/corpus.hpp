#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "malvis/binformat.hpp"

namespace malvis {

// Recipe for one synthetic family.
//
// Every sample starts with a short header-like section built from a
// per-family template, with `motif` planted at an absolute file offset in
// [motif_band_lo, motif_band_hi). Code sections are instruction streams
// over the synthetic code alphabet (which the default substitution table
// rewrites); data sections are fixed-stride records. A `pack_rate`
// fraction of samples is kept compressible; the rest carry a large
// high-entropy resource that the packer refuses. `prepacked` families are
// emitted already packed.
struct FamilySpec {
  std::string name;
  std::size_t count = 200;
  std::size_t min_size = 4096;
  std::size_t max_size = 16384;
  Bytes motif;
  std::size_t motif_band_lo = 32;
  std::size_t motif_band_hi = 64;
  double pack_rate = 0.25;
  bool prepacked = false;
  bool has_code = true;
  std::size_t overlay_min = 0;
  std::size_t overlay_max = 0;
  std::size_t record_stride = 16;
  std::uint8_t data_lo = 0x00;
  std::uint8_t data_hi = 0xFF;
  std::vector<int> years;
  std::uint64_t style_seed = 0;
};

/// Throws Error("InvalidSpec") for an empty motif, min_size > max_size, a
/// band too narrow for the motif, or rates outside [0, 1].
void validate(const FamilySpec& spec);

/// n samples with ids "<family>-<index>"; deterministic in (spec, n, seed).
std::vector<Binary> generate_family(const FamilySpec& spec, std::size_t n, std::uint64_t seed);

/// Five families, 1000 samples, 4:1 max/min class ratio, pairwise distinct
/// 12-byte motifs in the first 64 bytes.
std::vector<FamilySpec> default_family_specs();

/// Every family at its own `count`, concatenated in spec order.
std::vector<Binary> generate_corpus(const std::vector<FamilySpec>& specs, std::uint64_t seed);

std::vector<FamilySpec> load_family_specs(const std::filesystem::path& path);
std::string family_specs_to_json(const std::vector<FamilySpec>& specs);

struct ManifestEntry {
  std::string id;
  std::string path;  // relative to the manifest's directory
  std::string family;
  std::optional<int> year;
  Origin origin = Origin::base;
  std::optional<std::string> parent_id;
  bool operator==(const ManifestEntry&) const = default;
};

struct CorpusManifest {
  std::vector<ManifestEntry> entries;
};

inline constexpr const char* kManifestName = "manifest.jsonl";

/// Reads a JSON-lines manifest and every file it names. Errors:
/// MissingFile, DuplicateId, BadParent, BadManifest.
std::vector<Binary> load_corpus(const std::filesystem::path& manifest_path);

/// Writes samples/<id>.bin plus manifest.jsonl under `dir`.
CorpusManifest save_corpus(const std::vector<Binary>& corpus, const std::filesystem::path& dir);

CorpusManifest read_manifest(const std::filesystem::path& manifest_path);
void write_manifest(const CorpusManifest& manifest, const std::filesystem::path& manifest_path);

/// Throws DuplicateId / BadParent when the manifest invariants fail.
void check_manifest(const CorpusManifest& manifest);

/// Order-sensitive digest over (id, family, origin, bytes) of every sample.
std::string corpus_digest(const std::vector<Binary>& corpus);

}  // namespace malvis
