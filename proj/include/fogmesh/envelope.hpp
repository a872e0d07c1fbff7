#pragma once

#include <string>
#include <vector>

#include "fogmesh/bytes.hpp"
#include "fogmesh/errors.hpp"
#include "fogmesh/overlay.hpp"

namespace fogmesh {

inline constexpr std::uint8_t kEnvelopeMagic[4] = {0x46, 0x4F, 0x47, 0x32};  // "FOG2"
inline constexpr std::uint8_t kEnvelopeVersion = 1;
inline constexpr std::size_t kEnvelopeFixedOverhead = 40;  // everything but the topic bytes
inline constexpr std::size_t kMaxTopicLen = 256;
inline constexpr std::size_t kMaxMessagePayload = 64ull << 20;

enum class EnvelopeKind : std::uint8_t {
  kData = 1,
  kBeacon = 2,
  kAck = 3,
};

struct Envelope {
  EnvelopeKind kind = EnvelopeKind::kData;
  std::string topic;
  std::uint64_t message_id = 0;
  std::uint64_t seq = 0;
  Micros publish_instant = 0;
  std::uint16_t frag_index = 0;
  std::uint16_t frag_count = 1;
  Bytes payload;
};

inline std::size_t max_fragment_payload(const std::string& topic) {
  return kMaxOverlayPayload - kEnvelopeFixedOverhead - topic.size();
}

inline Bytes serialize_envelope(const Envelope& e) {
  ByteWriter w;
  w.raw(ByteView(kEnvelopeMagic, 4));
  w.u8(kEnvelopeVersion);
  w.u8(static_cast<std::uint8_t>(e.kind));
  w.u16(static_cast<std::uint16_t>(e.topic.size()));
  w.str(e.topic);
  w.u64(e.message_id);
  w.u64(e.seq);
  w.u64(e.publish_instant);
  w.u16(e.frag_index);
  w.u16(e.frag_count);
  w.u32(static_cast<std::uint32_t>(e.payload.size()));
  w.raw(ByteView(e.payload.data(), e.payload.size()));
  return w.take();
}

inline Envelope parse_envelope(ByteView data) {
  ByteReader rd(data);
  std::uint8_t magic[4];
  for (auto& m : magic) m = rd.u8();
  if (std::memcmp(magic, kEnvelopeMagic, 4) != 0)
    throw ParseError("envelope: bad magic");
  std::uint8_t version = rd.u8();
  if (version != kEnvelopeVersion) throw ParseError("envelope: unsupported version");
  Envelope e;
  std::uint8_t kind = rd.u8();
  if (kind < 1 || kind > 3) throw ParseError("envelope: unknown kind");
  e.kind = static_cast<EnvelopeKind>(kind);
  std::uint16_t topic_len = rd.u16();
  if (topic_len > kMaxTopicLen) throw ParseError("envelope: topic too long");
  e.topic = rd.str(topic_len);
  e.message_id = rd.u64();
  e.seq = rd.u64();
  e.publish_instant = rd.u64();
  e.frag_index = rd.u16();
  e.frag_count = rd.u16();
  std::uint32_t payload_len = rd.u32();
  e.payload = rd.raw(payload_len);
  if (!rd.done()) throw ParseError("envelope: trailing bytes");
  if (e.frag_count == 0 || e.frag_index >= e.frag_count)
    throw ParseError("envelope: fragment index out of range");
  return e;
}

// Beacon payload: u16 host id, u16 topic count, then per topic
// [u16 len | bytes | u8 mode] where mode 0 = best-effort, 1 = acked.
enum class DeliveryMode : std::uint8_t {
  kBestEffort = 0,
  kAcked = 1,
};

struct BeaconBody {
  std::uint16_t host_id = 0;
  std::vector<std::pair<std::string, DeliveryMode>> topics;
};

inline Bytes serialize_beacon(const BeaconBody& b) {
  ByteWriter w;
  w.u16(b.host_id);
  w.u16(static_cast<std::uint16_t>(b.topics.size()));
  for (const auto& [topic, mode] : b.topics) {
    w.u16(static_cast<std::uint16_t>(topic.size()));
    w.str(topic);
    w.u8(static_cast<std::uint8_t>(mode));
  }
  return w.take();
}

inline BeaconBody parse_beacon(ByteView data) {
  ByteReader rd(data);
  BeaconBody b;
  b.host_id = rd.u16();
  std::uint16_t n = rd.u16();
  for (std::uint16_t i = 0; i < n; ++i) {
    std::uint16_t len = rd.u16();
    std::string topic = rd.str(len);
    std::uint8_t mode = rd.u8();
    if (mode > 1) throw ParseError("beacon: unknown delivery mode");
    b.topics.emplace_back(std::move(topic), static_cast<DeliveryMode>(mode));
  }
  if (!rd.done()) throw ParseError("beacon: trailing bytes");
  return b;
}

}  // namespace fogmesh
