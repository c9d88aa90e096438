#pragma once

#include <filesystem>
#include <string>

#include "malvis/binformat.hpp"
#include "malvis/rng.hpp"

namespace testutil {

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("malvis-test-" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline malvis::Bytes random_bytes(malvis::Rng& rng, std::size_t n) {
  malvis::Bytes b(n);
  for (auto& x : b) x = static_cast<std::uint8_t>(rng.below(256));
  return b;
}

// Random well-formed container with 0-4 sections and an optional overlay.
inline malvis::Binary random_binary(malvis::Rng& rng, const std::string& id) {
  malvis::Binary b;
  b.id = id;
  b.family = "fam" + std::to_string(rng.below(3));
  const auto n = rng.below(5);
  for (std::uint64_t i = 0; i < n; ++i) {
    malvis::Section s;
    s.kind = static_cast<malvis::SectionKind>(rng.below(3));
    const bool structured = rng.bernoulli(0.5);
    s.bytes = random_bytes(rng, rng.below(2000));
    if (structured) {
      for (std::size_t k = 0; k < s.bytes.size(); ++k) s.bytes[k] = static_cast<std::uint8_t>((k * 7) % 13);
    }
    b.sections.push_back(std::move(s));
  }
  b.overlay = random_bytes(rng, rng.bernoulli(0.5) ? rng.below(600) : 0);
  b.header.magic = malvis::kContainerMagic;
  b.header.flags = malvis::derive_flags(b.header.magic, b.sections);
  return b;
}

}  // namespace testutil
