#pragma once

#include <string>

#include "fogmesh/bytes.hpp"
#include "fogmesh/codec.hpp"
#include "fogmesh/errors.hpp"

namespace fogmesh {

// Raw frame wire layout: u16 w, u16 h, u8 c, u64 frame_index,
// u64 capture_instant, u32 pixel length, pixels.
inline Bytes serialize_frame(const Frame& f) {
  validate_frame(f);
  ByteWriter w;
  w.u16(f.width);
  w.u16(f.height);
  w.u8(f.channels);
  w.u64(f.frame_index);
  w.u64(f.capture_instant);
  w.u32(static_cast<std::uint32_t>(f.pixels.size()));
  w.raw(ByteView(f.pixels.data(), f.pixels.size()));
  return w.take();
}

inline Frame parse_frame(ByteView data) {
  ByteReader rd(data);
  Frame f;
  f.width = rd.u16();
  f.height = rd.u16();
  f.channels = rd.u8();
  f.frame_index = rd.u64();
  f.capture_instant = rd.u64();
  std::uint32_t len = rd.u32();
  f.pixels = rd.raw(len);
  if (!rd.done()) throw ParseError("frame: trailing bytes");
  validate_frame(f);
  return f;
}

// Low-motion synthetic camera: a fixed noisy row tiled vertically (so
// single-frame compressors get traction) with a moving constant block. Frame
// content is a pure function of (seed, index).
class SyntheticVideo {
 public:
  struct Config {
    std::uint16_t width = 640;
    std::uint16_t height = 480;
    std::uint8_t channels = 3;
    std::uint16_t block = 32;
    std::uint64_t seed = 1;
  };

  SyntheticVideo() { init(); }
  explicit SyntheticVideo(Config cfg) : cfg_(cfg) { init(); }

  Frame frame(std::uint64_t index) const {
    Frame f;
    f.width = cfg_.width;
    f.height = cfg_.height;
    f.channels = cfg_.channels;
    f.frame_index = index;
    f.pixels.resize(f.pixel_count());
    std::size_t stride = row_.size();
    for (std::uint16_t y = 0; y < cfg_.height; ++y)
      std::memcpy(f.pixels.data() + static_cast<std::size_t>(y) * stride, row_.data(), stride);
    std::uint16_t bw = std::min<std::uint16_t>(cfg_.block, cfg_.width);
    std::uint16_t bh = std::min<std::uint16_t>(cfg_.block, cfg_.height);
    std::size_t max_x = cfg_.width - bw;
    std::size_t max_y = cfg_.height - bh;
    std::size_t bx = max_x ? (index * 3) % (max_x + 1) : 0;
    std::size_t by = max_y ? (index * 2) % (max_y + 1) : 0;
    for (std::size_t y = by; y < by + bh; ++y) {
      auto* p = f.pixels.data() + (y * cfg_.width + bx) * cfg_.channels;
      std::memset(p, 0xE7, static_cast<std::size_t>(bw) * cfg_.channels);
    }
    return f;
  }

  const Config& config() const { return cfg_; }
  std::size_t frame_bytes() const {
    return static_cast<std::size_t>(cfg_.width) * cfg_.height * cfg_.channels;
  }

 private:
  void init() {
    Rng rng(cfg_.seed);
    row_ = rng.bytes(static_cast<std::size_t>(cfg_.width) * cfg_.channels);
  }

  Config cfg_;
  Bytes row_;
};

}  // namespace fogmesh
