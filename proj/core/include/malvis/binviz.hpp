#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "malvis/binformat.hpp"

namespace malvis {

struct ByteImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major

  std::uint8_t at(std::size_t row, std::size_t col) const { return pixels[row * width + col]; }
  bool operator==(const ByteImage&) const = default;
};

// Square model input, row-major, values in [0, 1] when normalized.
struct InputTensor {
  std::size_t side = 0;
  std::vector<float> values;

  float at(std::size_t row, std::size_t col) const { return values[row * side + col]; }
  float& at(std::size_t row, std::size_t col) { return values[row * side + col]; }
};

// Row-major real-valued map, e.g. a class average image.
struct RealMap {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;
};

/// Image width by file size: <=10 KiB 32, <=30 KiB 64, <=60 KiB 128,
/// <=100 KiB 256, <=200 KiB 384, <=500 KiB 512, <=1000 KiB 768, else 1024.
std::size_t width_for_size(std::size_t n_bytes);

/// One pixel per byte, row-major; the last row is zero padded.
ByteImage bytes_to_image(ByteView bytes, std::optional<std::size_t> width_override = std::nullopt);

ByteImage binary_to_image(const Binary& b);

/// Nearest-neighbour resample to side x side. With `normalize`, pixel/255.
InputTensor resize_to_input(const ByteImage& img, std::size_t side, bool normalize = true);

/// Elementwise mean of the normalized side x side resamples.
RealMap average_image(std::span<const ByteImage> images, std::size_t side);

/// Binary PGM (P5, maxval 255).
void write_pgm(const std::filesystem::path& path, const ByteImage& img);
ByteImage read_pgm(const std::filesystem::path& path);

/// Affine rescale of a real map to 8 bits; constant maps become all zero.
ByteImage to_gray(const RealMap& map, double* min_out = nullptr, double* max_out = nullptr);

/// P5 of the rescaled map plus `<path>.json` with {"min","max",...extra}.
void write_real_map(const std::filesystem::path& path, const RealMap& map,
                    const std::string& extra_json_fields = "");

}  // namespace malvis
