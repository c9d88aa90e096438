#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "malvis/binformat.hpp"

namespace malvis::obfusc {

struct NotApplicable {
  std::string reason;
  bool operator==(const NotApplicable&) const = default;
};

// Either the transformed sample or the reason the transform refused it.
class TransformResult {
 public:
  TransformResult(Binary b) : value_(std::move(b)) {}  // NOLINT
  TransformResult(NotApplicable n) : value_(std::move(n)) {}  // NOLINT

  bool applied() const noexcept { return std::holds_alternative<Binary>(value_); }
  const Binary& binary() const { return std::get<Binary>(value_); }
  Binary& binary() { return std::get<Binary>(value_); }
  const std::string& reason() const { return std::get<NotApplicable>(value_).reason; }

 private:
  std::variant<Binary, NotApplicable> value_;
};

using PackResult = TransformResult;
using MorphResult = TransformResult;

inline constexpr const char* kAlreadyPacked = "already packed";
inline constexpr const char* kIncompressible = "incompressible";
inline constexpr const char* kNoCodeSection = "no code section";
inline constexpr const char* kNoMatches = "no matches";

/// Compresses header and sections behind an MVXP stub; the overlay is
/// appended untouched. Stub section payload: u32 LE original body length,
/// then the compressed body XORed with a fixed keystream.
PackResult pack(const Binary& b);

/// Inverse of pack. Throws Error("NotPacked") for anything pack() did not emit.
Binary unpack(const Binary& packed);

/// Runs an external packer (`cmd in out`) on the serialized sample and
/// parses its output. Non-zero exit maps to not_applicable.
PackResult pack_external(const Binary& b, const std::string& cmd,
                         const std::filesystem::path& scratch_dir);

struct Substitution {
  Bytes pattern;
  Bytes replacement;
  bool operator==(const Substitution&) const = default;
};

// Semantics-preserving rewrites for the synthetic code alphabet.
class SubstitutionTable {
 public:
  /// Throws Error("InvalidTable") for empty patterns or when one pattern is a
  /// prefix of another.
  explicit SubstitutionTable(std::vector<Substitution> entries);

  /// Index of the entry whose pattern starts at `pos`, or -1.
  int match_at(ByteView code, std::size_t pos) const noexcept;
  const std::vector<Substitution>& entries() const noexcept { return entries_; }

  static SubstitutionTable from_json_file(const std::filesystem::path& path);
  std::string to_json() const;

 private:
  std::vector<Substitution> entries_;
  std::vector<std::vector<int>> by_first_byte_;
};

/// Bidirectional x86-flavoured pairs; every replacement is itself a pattern,
/// so a morphable sample stays morphable.
const SubstitutionTable& default_substitution_table();

inline constexpr double kReplaceProbability = 0.5;

/// Left-to-right scan of every code section, `passes` times; each match is
/// rewritten with probability 0.5 from a stream keyed by (seed, sample id).
MorphResult morph(const Binary& b, const SubstitutionTable& table, int passes,
                  std::uint64_t seed);

struct EnhanceStats {
  std::size_t pack_selected = 0;
  std::size_t pack_appended = 0;
  std::size_t pack_skipped = 0;
  std::size_t morph_selected = 0;
  std::size_t morph_appended = 0;
  std::size_t morph_skipped = 0;
};

struct EnhancedSet {
  std::vector<Binary> samples;
  EnhanceStats stats;
};

/// Keeps every original and appends packed/morphed copies of two seeded
/// subsets (sizes round(fraction * n)). Refused transforms are skipped and
/// counted.
EnhancedSet build_enhanced_training_set(const std::vector<Binary>& train, double pack_fraction,
                                        double morph_fraction, std::uint64_t seed,
                                        int morph_passes = 1,
                                        const SubstitutionTable& table = default_substitution_table());

struct ConversionRate {
  std::size_t total = 0;
  std::size_t converted = 0;
  /// converted / total as a percentage, rounded half-up to 2 decimals.
  double percentage = 0.0;
};

struct ConversionReport {
  std::map<std::string, ConversionRate> per_family;
  ConversionRate overall;
  std::vector<std::string> empty_classes;
};

/// Percentage with exact rational half-up rounding to two decimals.
double percentage_half_up(std::size_t converted, std::size_t total) noexcept;

/// `transformed` holds the successful outputs whose parent_id names a base
/// sample. Families with zero conversions are listed as empty classes.
ConversionReport conversion_report(const std::vector<Binary>& base,
                                   const std::vector<Binary>& transformed);

}  // namespace malvis::obfusc
