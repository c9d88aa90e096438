#include "malvis/lz.hpp"

#include <algorithm>

#include "malvis/error.hpp"

namespace malvis::lz {
namespace {

constexpr std::size_t kHashBits = 15;
constexpr std::size_t kMaxChain = 48;
constexpr std::uint32_t kNone = 0xFFFFFFFFu;

inline std::uint32_t hash4(const std::uint8_t* p) noexcept {
  const std::uint32_t v = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                          (static_cast<std::uint32_t>(p[2]) << 16) |
                          (static_cast<std::uint32_t>(p[3]) << 24);
  return (v * 2654435761u) >> (32 - kHashBits);
}

void put_varint(Bytes& out, std::size_t v) {
  while (v >= 0x80) {
    out.push_back(static_cast<std::uint8_t>(v | 0x80));
    v >>= 7;
  }
  out.push_back(static_cast<std::uint8_t>(v));
}

std::size_t get_varint(ByteView in, std::size_t& pos) {
  std::size_t v = 0;
  for (int shift = 0; shift < 63; shift += 7) {
    if (pos >= in.size()) throw runtime_error("CorruptStream", "truncated varint");
    const std::uint8_t b = in[pos++];
    v |= static_cast<std::size_t>(b & 0x7F) << shift;
    if (!(b & 0x80)) return v;
  }
  throw runtime_error("CorruptStream", "varint too long");
}

class TokenWriter {
 public:
  explicit TokenWriter(Bytes& out) : out_(out) {}

  void literal(std::uint8_t b) {
    open();
    out_.push_back(b);
    advance();
  }
  void match(std::size_t distance, std::size_t length) {
    open();
    out_[flag_pos_] |= static_cast<std::uint8_t>(1u << count_);
    put_varint(out_, distance);
    put_varint(out_, length - kMinMatch);
    advance();
  }

 private:
  void open() {
    if (count_ == 0) {
      flag_pos_ = out_.size();
      out_.push_back(0);
    }
  }
  void advance() { count_ = (count_ + 1) % 8; }

  Bytes& out_;
  std::size_t flag_pos_ = 0;
  unsigned count_ = 0;
};

}  // namespace

Bytes compress(ByteView in) {
  Bytes out;
  out.reserve(in.size() / 2 + 16);
  TokenWriter tokens(out);
  const std::size_t n = in.size();
  std::vector<std::uint32_t> head(std::size_t{1} << kHashBits, kNone);
  std::vector<std::uint32_t> prev(n, kNone);

  auto insert = [&](std::size_t pos) {
    if (pos + kMinMatch > n) return;
    const std::uint32_t h = hash4(in.data() + pos);
    prev[pos] = head[h];
    head[h] = static_cast<std::uint32_t>(pos);
  };

  std::size_t pos = 0;
  while (pos < n) {
    std::size_t best_len = 0;
    std::size_t best_dist = 0;
    if (pos + kMinMatch <= n) {
      std::uint32_t cand = head[hash4(in.data() + pos)];
      for (std::size_t chain = 0; cand != kNone && chain < kMaxChain; ++chain) {
        const std::size_t dist = pos - cand;
        if (dist > kWindow) break;
        std::size_t len = 0;
        const std::size_t limit = n - pos;
        while (len < limit && in[cand + len] == in[pos + len]) ++len;
        if (len > best_len) {
          best_len = len;
          best_dist = dist;
          if (len == limit) break;
        }
        cand = prev[cand];
      }
    }
    if (best_len >= kMinMatch) {
      tokens.match(best_dist, best_len);
      // Long runs only index their tail; the chain would be useless anyway.
      const std::size_t end = pos + best_len;
      const std::size_t index_from = best_len > 256 ? end - 256 : pos;
      for (std::size_t p = index_from; p < end; ++p) insert(p);
      pos = end;
    } else {
      tokens.literal(in[pos]);
      insert(pos);
      ++pos;
    }
  }
  return out;
}

Bytes decompress(ByteView stream, std::size_t expected_size) {
  Bytes out;
  out.reserve(expected_size);
  std::size_t pos = 0;
  while (pos < stream.size()) {
    const std::uint8_t flag = stream[pos++];
    for (unsigned i = 0; i < 8 && pos < stream.size(); ++i) {
      if (flag & (1u << i)) {
        const std::size_t dist = get_varint(stream, pos);
        const std::size_t len = get_varint(stream, pos) + kMinMatch;
        if (dist == 0 || dist > out.size()) throw runtime_error("CorruptStream", "bad match distance");
        if (out.size() + len > expected_size) throw runtime_error("CorruptStream", "output overrun");
        const std::size_t from = out.size() - dist;
        for (std::size_t k = 0; k < len; ++k) out.push_back(out[from + k]);
      } else {
        if (out.size() + 1 > expected_size) throw runtime_error("CorruptStream", "output overrun");
        out.push_back(stream[pos++]);
      }
    }
  }
  if (out.size() != expected_size) {
    throw runtime_error("CorruptStream", "decoded " + std::to_string(out.size()) +
                                             " bytes, expected " + std::to_string(expected_size));
  }
  return out;
}

}  // namespace malvis::lz
