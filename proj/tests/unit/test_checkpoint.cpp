#include <doctest.h>

#include "helpers.hpp"
#include "malvis/digest.hpp"
#include "malvis/error.hpp"
#include "malvis/nn.hpp"

using namespace malvis;
using namespace malvis::nn;

namespace {

Hyperparams small() {
  Hyperparams hp;
  hp.input_side = 16;
  hp.filters = {4, 8, 8};
  hp.dense1 = 32;
  hp.dense2 = 16;
  return hp;
}

std::string load_error(Bytes bytes) {
  try {
    model_from_checkpoint(bytes);
  } catch (const Error& e) {
    return e.name();
  }
  return "";
}

void write_le32(Bytes& b, std::size_t at, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b[at + i] = static_cast<std::uint8_t>(v >> (8 * i));
}

}  // namespace

TEST_CASE("checkpoint round trip is exact") {
  Model m(small(), {"a", "b", "c"}, 3);
  // make running statistics non-trivial
  for (auto& b : m.blocks) b.running_mean.setConstant(0.125f);
  const auto dir = testutil::temp_dir("ckpt");
  save_checkpoint(m, dir / "m.ckpt");
  const Model back = load_checkpoint(dir / "m.ckpt");
  CHECK(back.classes() == m.classes());
  CHECK(back.hyperparams() == m.hyperparams());
  CHECK(back.seed() == m.seed());
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    CHECK(back.blocks[i].weight == m.blocks[i].weight);
    CHECK(back.blocks[i].running_mean == m.blocks[i].running_mean);
  }
  for (std::size_t i = 0; i < m.dense.size(); ++i) CHECK(back.dense[i].weight == m.dense[i].weight);
  CHECK(model_digest(back) == model_digest(m));
  save_checkpoint(back, dir / "m2.ckpt");
  CHECK(read_file(dir / "m2.ckpt") == read_file(dir / "m.ckpt"));
}

TEST_CASE("checkpoint layout: magic, version, CRC32 trailer") {
  const Model m(small(), {"a", "b"}, 1);
  const Bytes b = checkpoint_bytes(m);
  CHECK(Bytes(b.begin(), b.begin() + 4) == Bytes{'M', 'V', 'X', 'C'});
  CHECK((b[4] | (b[5] << 8)) == static_cast<int>(kCheckpointVersion));
  const std::uint32_t crc = crc32(ByteView(b.data(), b.size() - 4));
  const std::uint32_t stored = b[b.size() - 4] | (b[b.size() - 3] << 8) | (b[b.size() - 2] << 16) |
                               (static_cast<std::uint32_t>(b[b.size() - 1]) << 24);
  CHECK(crc == stored);
}

TEST_CASE("corrupted checkpoints are rejected") {
  const Model m(small(), {"a", "b"}, 1);
  const Bytes good = checkpoint_bytes(m);

  Bytes bad_magic = good;
  bad_magic[0] = 'X';
  CHECK(load_error(bad_magic) == "BadMagic");

  Bytes bad_version = good;
  write_le32(bad_version, 4, 99);
  CHECK(load_error(bad_version) == "VersionMismatch");

  Bytes flipped = good;
  flipped[good.size() / 2] ^= 0x01;
  CHECK(load_error(flipped) == "CorruptCheckpoint");

  CHECK(load_error(Bytes{'M', 'V'}) == "BadMagic");
}

TEST_CASE("property: 500 seeded checkpoints round trip") {
  Hyperparams hp;
  hp.input_side = 8;
  hp.filters = {2};
  hp.first_kernel = 3;
  hp.dense1 = 4;
  hp.dense2 = 3;
  for (std::uint64_t s = 0; s < 500; ++s) {
    const Model m(hp, {"x", "y"}, s);
    const Bytes b = checkpoint_bytes(m);
    REQUIRE(checkpoint_bytes(model_from_checkpoint(b)) == b);
  }
}

TEST_CASE("digest helpers match published vectors") {
  const std::string abc = "abc";
  const ByteView v(reinterpret_cast<const std::uint8_t*>(abc.data()), abc.size());
  CHECK(sha256_hex(v) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  const std::string nine = "123456789";
  CHECK(crc32(ByteView(reinterpret_cast<const std::uint8_t*>(nine.data()), nine.size())) == 0xCBF43926u);
}
