#pragma once

#include <zlib.h>

#include <cstring>
#include <optional>
#include <string>

#include "fogmesh/bytes.hpp"
#include "fogmesh/errors.hpp"
#include "fogmesh/executor.hpp"

namespace fogmesh {

inline constexpr std::uint16_t kMaxFrameSide = 32767;
inline constexpr int kDefaultKeyframeInterval = 30;

struct Frame {
  std::uint16_t width = 0;
  std::uint16_t height = 0;
  std::uint8_t channels = 0;
  Bytes pixels;  // row-major, width*height*channels bytes
  Micros capture_instant = 0;
  std::uint64_t frame_index = 0;

  std::size_t pixel_count() const {
    return static_cast<std::size_t>(width) * height * channels;
  }
  bool same_shape(const Frame& o) const {
    return width == o.width && height == o.height && channels == o.channels;
  }
  bool operator==(const Frame& o) const {
    return same_shape(o) && pixels == o.pixels && frame_index == o.frame_index;
  }
};

inline void validate_frame(const Frame& f) {
  if (f.width == 0 || f.height == 0) throw ValidationError("frame: zero dimension");
  if (f.width > kMaxFrameSide || f.height > kMaxFrameSide)
    throw ValidationError("frame: dimension exceeds 32767");
  if (f.channels != 1 && f.channels != 3 && f.channels != 4)
    throw ValidationError("frame: channels must be 1, 3 or 4");
  if (f.pixels.size() != f.pixel_count())
    throw ValidationError("frame: pixel buffer length mismatch");
}

// --- general-purpose lossless byte compressor (zlib deflate) -----------------

// Blob layout: u32 raw length, then the zlib stream.
inline Bytes deflate_bytes(ByteView raw) {
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  Bytes out(4 + bound);
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(raw.size()));
  Bytes header = w.take();
  std::memcpy(out.data(), header.data(), 4);
  int rc = compress2(out.data() + 4, &bound, raw.data(), static_cast<uLong>(raw.size()),
                     Z_DEFAULT_COMPRESSION);
  if (rc != Z_OK) throw Error("deflate failed: " + std::to_string(rc));
  out.resize(4 + bound);
  return out;
}

inline Bytes inflate_bytes(ByteView blob) {
  if (blob.size() < 4) throw ParseError("compressed blob truncated");
  ByteReader rd(blob);
  std::uint32_t raw_len = rd.u32();
  Bytes out(raw_len);
  uLongf out_len = raw_len;
  int rc = uncompress(out.data(), &out_len, blob.data() + 4,
                      static_cast<uLong>(blob.size() - 4));
  if (rc != Z_OK || out_len != raw_len) throw ParseError("compressed blob corrupt");
  return out;
}

// --- zero-run-length coding ---------------------------------------------------

// Diff buffers are mostly zeros; encode as repeating
// [varint zero-run][varint literal-count][literal bytes].
inline Bytes zrle_encode(ByteView raw) {
  Bytes out;
  std::size_t i = 0;
  while (i < raw.size()) {
    std::size_t zeros = 0;
    while (i + zeros < raw.size() && raw[i + zeros] == 0) ++zeros;
    i += zeros;
    std::size_t lits = 0;
    while (i + lits < raw.size() && raw[i + lits] != 0) ++lits;
    put_varint(out, zeros);
    put_varint(out, lits);
    out.insert(out.end(), raw.begin() + i, raw.begin() + i + lits);
    i += lits;
  }
  return out;
}

inline Bytes zrle_decode(ByteView coded, std::size_t expected_len) {
  Bytes out;
  out.reserve(expected_len);
  std::size_t pos = 0;
  while (pos < coded.size()) {
    std::uint64_t zeros = get_varint(coded, pos);
    std::uint64_t lits = get_varint(coded, pos);
    if (out.size() + zeros + lits > expected_len)
      throw ParseError("zrle: output exceeds expected length");
    out.resize(out.size() + zeros, 0);
    if (pos + lits > coded.size()) throw ParseError("zrle: truncated literals");
    out.insert(out.end(), coded.begin() + pos, coded.begin() + pos + lits);
    pos += lits;
  }
  if (out.size() != expected_len) throw ParseError("zrle: output length mismatch");
  return out;
}

// --- chunks -------------------------------------------------------------------

enum class ChunkKind : std::uint8_t {
  kKeyframe = 1,
  kDelta = 2,
};

struct CodecChunk {
  ChunkKind kind = ChunkKind::kKeyframe;
  std::uint64_t base_index = 0;  // keyframe: own index; delta: index it applies to
  std::uint16_t width = 0;
  std::uint16_t height = 0;
  std::uint8_t channels = 0;
  Bytes encoded;
};

inline Bytes serialize_chunk(const CodecChunk& c) {
  ByteWriter w;
  w.u8(static_cast<std::uint8_t>(c.kind));
  w.u64(c.base_index);
  w.u16(c.width);
  w.u16(c.height);
  w.u8(c.channels);
  w.u32(static_cast<std::uint32_t>(c.encoded.size()));
  w.raw(ByteView(c.encoded.data(), c.encoded.size()));
  return w.take();
}

inline CodecChunk parse_chunk(ByteView data) {
  ByteReader rd(data);
  CodecChunk c;
  std::uint8_t kind = rd.u8();
  if (kind != 1 && kind != 2) throw ParseError("chunk: unknown kind");
  c.kind = static_cast<ChunkKind>(kind);
  c.base_index = rd.u64();
  c.width = rd.u16();
  c.height = rd.u16();
  c.channels = rd.u8();
  std::uint32_t len = rd.u32();
  c.encoded = rd.raw(len);
  if (!rd.done()) throw ParseError("chunk: trailing bytes");
  return c;
}

// --- per-frame (stateless) mode -----------------------------------------------

// Layout: u16 w, u16 h, u8 c, u64 frame_index, u64 capture_instant, deflate blob.
inline Bytes per_frame_encode(const Frame& f) {
  validate_frame(f);
  ByteWriter w;
  w.u16(f.width);
  w.u16(f.height);
  w.u8(f.channels);
  w.u64(f.frame_index);
  w.u64(f.capture_instant);
  w.raw(deflate_bytes(ByteView(f.pixels.data(), f.pixels.size())));
  return w.take();
}

inline Frame per_frame_decode(ByteView data) {
  ByteReader rd(data);
  Frame f;
  f.width = rd.u16();
  f.height = rd.u16();
  f.channels = rd.u8();
  f.frame_index = rd.u64();
  f.capture_instant = rd.u64();
  Bytes blob = rd.raw(rd.remaining());
  f.pixels = inflate_bytes(ByteView(blob.data(), blob.size()));
  validate_frame(f);
  return f;
}

// --- streaming (keyframe + delta) mode -----------------------------------------

class StreamEncoder {
 public:
  explicit StreamEncoder(int keyframe_interval = kDefaultKeyframeInterval)
      : keyframe_interval_(keyframe_interval) {}

  // Keyframe every keyframe_interval frames, on shape change, on
  // non-consecutive frame indices, and on request (resync).
  CodecChunk encode(const Frame& f) {
    validate_frame(f);
    bool key = !last_ || !last_->same_shape(f) ||
               f.frame_index != last_->frame_index + 1 ||
               frames_since_keyframe_ >= keyframe_interval_ - 1 || keyframe_requested_;
    CodecChunk c;
    c.width = f.width;
    c.height = f.height;
    c.channels = f.channels;
    if (key) {
      c.kind = ChunkKind::kKeyframe;
      c.base_index = f.frame_index;
      c.encoded = deflate_bytes(ByteView(f.pixels.data(), f.pixels.size()));
      frames_since_keyframe_ = 0;
      keyframe_requested_ = false;
    } else {
      c.kind = ChunkKind::kDelta;
      c.base_index = last_->frame_index;
      Bytes diff(f.pixels.size());
      for (std::size_t i = 0; i < diff.size(); ++i)
        diff[i] = static_cast<std::uint8_t>(f.pixels[i] - last_->pixels[i]);
      Bytes rle = zrle_encode(ByteView(diff.data(), diff.size()));
      c.encoded = deflate_bytes(ByteView(rle.data(), rle.size()));
      ++frames_since_keyframe_;
    }
    last_ = f;
    return c;
  }

  void request_keyframe() { keyframe_requested_ = true; }
  const std::optional<Frame>& last() const { return last_; }

 private:
  int keyframe_interval_;
  int frames_since_keyframe_ = 0;
  bool keyframe_requested_ = false;
  std::optional<Frame> last_;
};

class StreamDecoder {
 public:
  // Throws ResyncNeeded when a delta does not apply to the current state;
  // the caller is expected to request a keyframe from the encoder.
  Frame decode(const CodecChunk& c) {
    if (c.kind == ChunkKind::kKeyframe) {
      Frame f;
      f.width = c.width;
      f.height = c.height;
      f.channels = c.channels;
      f.frame_index = c.base_index;
      f.pixels = inflate_bytes(ByteView(c.encoded.data(), c.encoded.size()));
      validate_frame(f);
      last_ = f;
      return f;
    }
    if (!last_)
      throw ResyncNeeded("codec: delta before any keyframe", 0, c.base_index);
    if (c.base_index != last_->frame_index)
      throw ResyncNeeded("codec: delta base mismatch", last_->frame_index, c.base_index);
    if (c.width != last_->width || c.height != last_->height || c.channels != last_->channels)
      throw ResyncNeeded("codec: delta shape mismatch", last_->frame_index, c.base_index);
    Bytes rle = inflate_bytes(ByteView(c.encoded.data(), c.encoded.size()));
    Bytes diff = zrle_decode(ByteView(rle.data(), rle.size()), last_->pixels.size());
    Frame f = *last_;
    f.frame_index = c.base_index + 1;
    for (std::size_t i = 0; i < diff.size(); ++i)
      f.pixels[i] = static_cast<std::uint8_t>(f.pixels[i] + diff[i]);
    last_ = f;
    return f;
  }

  const std::optional<Frame>& last() const { return last_; }
  void reset() { last_.reset(); }

 private:
  std::optional<Frame> last_;
};

}  // namespace fogmesh
