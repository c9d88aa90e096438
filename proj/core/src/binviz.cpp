#include "malvis/binviz.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "malvis/error.hpp"

namespace malvis {

std::size_t width_for_size(std::size_t n_bytes) {
  if (n_bytes == 0) throw validation_error("EmptyInput", "cannot size an image for 0 bytes");
  constexpr std::size_t KiB = 1024;
  struct Row {
    std::size_t limit;
    std::size_t width;
  };
  static constexpr Row kTable[] = {{10 * KiB, 32},   {30 * KiB, 64},   {60 * KiB, 128},
                                   {100 * KiB, 256}, {200 * KiB, 384}, {500 * KiB, 512},
                                   {1000 * KiB, 768}};
  for (const auto& row : kTable) {
    if (n_bytes <= row.limit) return row.width;
  }
  return 1024;
}

ByteImage bytes_to_image(ByteView bytes, std::optional<std::size_t> width_override) {
  if (bytes.empty()) throw validation_error("EmptyInput", "no bytes to convert");
  ByteImage img;
  img.width = width_override.value_or(width_for_size(bytes.size()));
  if (img.width == 0) throw validation_error("InvalidArgument", "image width must be positive");
  img.height = (bytes.size() + img.width - 1) / img.width;
  img.pixels.assign(img.width * img.height, 0);
  std::copy(bytes.begin(), bytes.end(), img.pixels.begin());
  return img;
}

ByteImage binary_to_image(const Binary& b) { return bytes_to_image(serialize(b)); }

InputTensor resize_to_input(const ByteImage& img, std::size_t side, bool normalize) {
  if (side == 0) throw validation_error("InvalidArgument", "input side must be positive");
  if (img.width == 0 || img.height == 0) throw validation_error("EmptyInput", "empty image");
  InputTensor t;
  t.side = side;
  t.values.resize(side * side);
  for (std::size_t r = 0; r < side; ++r) {
    const std::size_t sr = r * img.height / side;
    for (std::size_t c = 0; c < side; ++c) {
      const std::size_t sc = c * img.width / side;
      const auto v = static_cast<float>(img.at(sr, sc));
      t.values[r * side + c] = normalize ? v / 255.0f : v;
    }
  }
  return t;
}

RealMap average_image(std::span<const ByteImage> images, std::size_t side) {
  if (images.empty()) throw validation_error("EmptyList", "average_image needs at least one image");
  RealMap m{side, side, std::vector<double>(side * side, 0.0)};
  for (const auto& img : images) {
    const InputTensor t = resize_to_input(img, side, false);
    for (std::size_t i = 0; i < m.values.size(); ++i) m.values[i] += t.values[i];
  }
  const double denom = 255.0 * static_cast<double>(images.size());
  for (auto& v : m.values) v /= denom;
  return m;
}

void write_pgm(const std::filesystem::path& path, const ByteImage& img) {
  std::ostringstream header;
  header << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  Bytes out;
  const std::string h = header.str();
  out.insert(out.end(), h.begin(), h.end());
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  write_file(path, out);
}

ByteImage read_pgm(const std::filesystem::path& path) {
  const Bytes data = read_file(path);
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < data.size()) {
      if (data[pos] == '#') {
        while (pos < data.size() && data[pos] != '\n') ++pos;
      } else if (std::isspace(data[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    std::string t;
    while (pos < data.size() && !std::isspace(data[pos])) t.push_back(static_cast<char>(data[pos++]));
    return t;
  };
  if (token() != "P5") throw validation_error("BadImage", path.string() + ": not a P5 PGM");
  ByteImage img;
  try {
    img.width = std::stoul(token());
    img.height = std::stoul(token());
    if (std::stoul(token()) != 255) throw validation_error("BadImage", path.string() + ": maxval must be 255");
  } catch (const std::logic_error&) {
    throw validation_error("BadImage", path.string() + ": malformed header");
  }
  ++pos;  // single whitespace before the raster
  if (data.size() < pos + img.width * img.height) throw validation_error("BadImage", path.string() + ": short raster");
  img.pixels.assign(data.begin() + static_cast<std::ptrdiff_t>(pos),
                    data.begin() + static_cast<std::ptrdiff_t>(pos + img.width * img.height));
  return img;
}

ByteImage to_gray(const RealMap& map, double* min_out, double* max_out) {
  ByteImage img{map.cols, map.rows, std::vector<std::uint8_t>(map.values.size(), 0)};
  if (map.values.empty()) return img;
  const auto [lo_it, hi_it] = std::minmax_element(map.values.begin(), map.values.end());
  const double lo = *lo_it, hi = *hi_it;
  if (min_out) *min_out = lo;
  if (max_out) *max_out = hi;
  if (hi > lo) {
    for (std::size_t i = 0; i < map.values.size(); ++i) {
      img.pixels[i] = static_cast<std::uint8_t>(std::lround(255.0 * (map.values[i] - lo) / (hi - lo)));
    }
  }
  return img;
}

void write_real_map(const std::filesystem::path& path, const RealMap& map,
                    const std::string& extra_json_fields) {
  double lo = 0, hi = 0;
  write_pgm(path, to_gray(map, &lo, &hi));
  nlohmann::ordered_json j;
  j["min"] = lo;
  j["max"] = hi;
  if (!extra_json_fields.empty()) {
    for (const auto& [k, v] : nlohmann::ordered_json::parse(extra_json_fields).items()) j[k] = v;
  }
  const std::string s = j.dump(2) + "\n";
  auto sidecar = path;
  sidecar += ".json";
  write_file(sidecar, ByteView(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

}  // namespace malvis
