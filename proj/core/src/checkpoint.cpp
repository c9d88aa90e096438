#include <cstring>

#include "malvis/config.hpp"
#include "malvis/digest.hpp"
#include "malvis/error.hpp"
#include "malvis/nn.hpp"

namespace malvis::nn {
namespace {

constexpr std::uint8_t kMagic[4] = {'M', 'V', 'X', 'C'};

void put_u32(Bytes& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32(ByteView in, std::size_t pos) {
  return static_cast<std::uint32_t>(in[pos]) | (static_cast<std::uint32_t>(in[pos + 1]) << 8) |
         (static_cast<std::uint32_t>(in[pos + 2]) << 16) | (static_cast<std::uint32_t>(in[pos + 3]) << 24);
}

void put_f32(Bytes& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

float get_f32(ByteView in, std::size_t pos) {
  const std::uint32_t bits = get_u32(in, pos);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

std::vector<NamedTensor<float>> all_tensors(Model& m) {
  auto t = m.parameters();
  for (auto& b : m.buffers()) t.push_back(b);
  return t;
}

}  // namespace

Bytes checkpoint_bytes(const Model& model) {
  Model& m = const_cast<Model&>(model);  // tensor enumeration only; nothing is written
  const auto tensors = all_tensors(m);
  nlohmann::ordered_json header;
  header["format"] = "malvis-checkpoint";
  header["hyperparams"] = hyperparams_to_json(model.hyperparams());
  header["classes"] = model.classes();
  header["seed"] = model.seed();
  nlohmann::ordered_json shapes = nlohmann::ordered_json::array();
  for (const auto& t : tensors) {
    shapes.push_back({{"name", t.name}, {"shape", {t.tensor->rows(), t.tensor->cols()}}});
  }
  header["tensors"] = shapes;
  const std::string h = header.dump();

  Bytes out(kMagic, kMagic + 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(h.size()));
  out.insert(out.end(), h.begin(), h.end());
  for (const auto& t : tensors) {
    const float* d = t.tensor->data();
    for (Eigen::Index i = 0; i < t.tensor->size(); ++i) put_f32(out, d[i]);
  }
  put_u32(out, crc32(out));
  return out;
}

Model model_from_checkpoint(ByteView bytes) {
  if (bytes.size() < 16 || !std::equal(kMagic, kMagic + 4, bytes.begin())) {
    throw validation_error("BadMagic", "not a malvis checkpoint");
  }
  const std::uint32_t version = get_u32(bytes, 4);
  if (version != kCheckpointVersion) {
    throw validation_error("VersionMismatch", "checkpoint version " + std::to_string(version) + ", expected " +
                                                  std::to_string(kCheckpointVersion));
  }
  const std::uint32_t stored_crc = get_u32(bytes, bytes.size() - 4);
  if (crc32(bytes.first(bytes.size() - 4)) != stored_crc) {
    throw validation_error("CorruptCheckpoint", "CRC32 mismatch");
  }
  const std::uint32_t hlen = get_u32(bytes, 8);
  if (12 + static_cast<std::size_t>(hlen) + 4 > bytes.size()) throw validation_error("CorruptCheckpoint", "header overruns file");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + hlen);
  } catch (const nlohmann::json::exception& e) {
    throw validation_error("CorruptCheckpoint", e.what());
  }
  Model model(hyperparams_from_json(header.at("hyperparams")), header.at("classes").get<std::vector<std::string>>(),
              header.at("seed").get<std::uint64_t>());
  auto tensors = all_tensors(model);
  const auto& declared = header.at("tensors");
  if (declared.size() != tensors.size()) throw validation_error("CorruptCheckpoint", "tensor count mismatch");
  std::size_t pos = 12 + hlen;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    auto& t = *tensors[i].tensor;
    const auto& d = declared[i];
    if (d.at("name").get<std::string>() != tensors[i].name || d.at("shape").at(0).get<Eigen::Index>() != t.rows() ||
        d.at("shape").at(1).get<Eigen::Index>() != t.cols()) {
      throw validation_error("CorruptCheckpoint", "tensor " + tensors[i].name + " does not match the architecture");
    }
    if (pos + 4 * static_cast<std::size_t>(t.size()) + 4 > bytes.size()) throw validation_error("CorruptCheckpoint", "short payload");
    float* out = t.data();
    for (Eigen::Index k = 0; k < t.size(); ++k, pos += 4) out[k] = get_f32(bytes, pos);
  }
  if (pos + 4 != bytes.size()) throw validation_error("CorruptCheckpoint", "trailing bytes after payload");
  return model;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  write_file(path, checkpoint_bytes(model));
}

Model load_checkpoint(const std::filesystem::path& path) { return model_from_checkpoint(read_file(path)); }

std::string model_digest(const Model& model) { return sha256_hex(checkpoint_bytes(model)); }

}  // namespace malvis::nn
