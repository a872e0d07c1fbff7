#pragma once

#include <cstring>
#include <optional>
#include <string>

#include "fogmesh/bytes.hpp"
#include "fogmesh/crypto.hpp"
#include "fogmesh/errors.hpp"

namespace fogmesh {

// Noise_IK_25519_ChaChaPoly_SHA256 (Noise spec rev 34). The initiator must
// know the responder's static public key; the initiator's static travels
// encrypted in message 1 and the responder authorizes it before answering.
// Same pattern family as WireGuard's handshake, without the psk2 extension.
namespace noise {

inline constexpr const char* kProtocolName = "Noise_IK_25519_ChaChaPoly_SHA256";
inline constexpr const char* kPrologue = "fogmesh overlay v1";

// Nonce encoding for handshake AEAD operations per the Noise spec: 32 zero
// bits then the counter little-endian. (Transport datagrams use the artifact
// wire format instead; see overlay.hpp.)
inline std::array<std::uint8_t, 12> noise_nonce(std::uint64_t n) {
  std::array<std::uint8_t, 12> nonce{};
  for (int i = 0; i < 8; ++i) nonce[4 + i] = static_cast<std::uint8_t>(n >> (8 * i));
  return nonce;
}

struct Hkdf2 {
  Key32 k1, k2;
};

inline Hkdf2 hkdf(const Key32& chaining_key, ByteView input) {
  Key32 temp = hmac_sha256(chaining_key, input);
  Hkdf2 out;
  std::uint8_t one = 1;
  out.k1 = hmac_sha256(temp, ByteView(&one, 1));
  Bytes second(out.k1.b.begin(), out.k1.b.end());
  second.push_back(2);
  out.k2 = hmac_sha256(temp, second);
  return out;
}

class SymmetricState {
 public:
  SymmetricState() {
    std::string name = kProtocolName;
    if (name.size() <= 32) {
      std::memcpy(h_.b.data(), name.data(), name.size());
    } else {
      h_ = sha256(ByteView(reinterpret_cast<const std::uint8_t*>(name.data()), name.size()));
    }
    ck_ = h_;
    mix_hash(ByteView(reinterpret_cast<const std::uint8_t*>(kPrologue), std::strlen(kPrologue)));
  }

  void mix_hash(ByteView data) {
    Bytes buf(h_.b.begin(), h_.b.end());
    buf.insert(buf.end(), data.begin(), data.end());
    h_ = sha256(buf);
  }

  void mix_key(const Key32& input) {
    auto [new_ck, k] = hkdf(ck_, ByteView(input.b.data(), input.b.size()));
    ck_ = new_ck;
    k_ = k;
    has_key_ = true;
    n_ = 0;
  }

  Bytes encrypt_and_hash(ByteView plaintext) {
    if (!has_key_) {
      mix_hash(plaintext);
      return Bytes(plaintext.begin(), plaintext.end());
    }
    Bytes ct = aead_seal(k_, noise_nonce(n_++), ByteView(h_.b.data(), h_.b.size()), plaintext);
    mix_hash(ct);
    return ct;
  }

  Bytes decrypt_and_hash(ByteView ciphertext) {
    if (!has_key_) {
      mix_hash(ciphertext);
      return Bytes(ciphertext.begin(), ciphertext.end());
    }
    auto pt = aead_open(k_, noise_nonce(n_++), ByteView(h_.b.data(), h_.b.size()), ciphertext);
    if (!pt) throw AuthError("noise: handshake decryption failed");
    mix_hash(ciphertext);
    return std::move(*pt);
  }

  Hkdf2 split() const { return hkdf(ck_, ByteView()); }

 private:
  Key32 ck_, h_, k_;
  bool has_key_ = false;
  std::uint64_t n_ = 0;
};

struct TransportKeys {
  Key32 send_key;
  Key32 recv_key;
};

// Message 1: e(32) || enc(static)(48) || enc(payload)(len+16)
// Message 2: e(32) || enc(payload)(len+16)
class Handshake {
 public:
  static Handshake make_initiator(const KeyPair& local_static, const Key32& remote_static,
                                  std::optional<KeyPair> ephemeral = std::nullopt) {
    Handshake hs;
    hs.initiator_ = true;
    hs.s_ = local_static;
    hs.rs_ = remote_static;
    hs.e_ = ephemeral ? *ephemeral : generate_keypair();
    hs.ss_.mix_hash(ByteView(remote_static.b.data(), 32));  // pre-message <- s
    return hs;
  }

  static Handshake make_responder(const KeyPair& local_static,
                                  std::optional<KeyPair> ephemeral = std::nullopt) {
    Handshake hs;
    hs.initiator_ = false;
    hs.s_ = local_static;
    hs.e_ = ephemeral ? *ephemeral : generate_keypair();
    hs.ss_.mix_hash(ByteView(local_static.public_key.b.data(), 32));
    return hs;
  }

  Bytes write_message_1(ByteView payload = {}) {
    ss_.mix_hash(ByteView(e_.public_key.b.data(), 32));
    ss_.mix_key(x25519(e_.secret_key, rs_));                      // es
    Bytes enc_s = ss_.encrypt_and_hash(ByteView(s_.public_key.b.data(), 32));
    ss_.mix_key(x25519(s_.secret_key, rs_));                      // ss
    Bytes enc_payload = ss_.encrypt_and_hash(payload);
    Bytes out(e_.public_key.b.begin(), e_.public_key.b.end());
    out.insert(out.end(), enc_s.begin(), enc_s.end());
    out.insert(out.end(), enc_payload.begin(), enc_payload.end());
    return out;
  }

  // Returns the message-1 payload; the decrypted initiator static is then
  // available via remote_static() for authorization.
  Bytes read_message_1(ByteView msg) {
    if (msg.size() < 32 + 48 + kAeadTagLen) throw AuthError("noise: message 1 too short");
    Key32 re;
    std::memcpy(re.b.data(), msg.data(), 32);
    re_ = re;
    ss_.mix_hash(ByteView(re.b.data(), 32));
    ss_.mix_key(x25519(s_.secret_key, re));                       // es (responder side)
    Bytes rs_plain = ss_.decrypt_and_hash(msg.subspan(32, 48));
    std::memcpy(rs_.b.data(), rs_plain.data(), 32);
    ss_.mix_key(x25519(s_.secret_key, rs_));                      // ss
    return ss_.decrypt_and_hash(msg.subspan(80));
  }

  Bytes write_message_2(ByteView payload = {}) {
    ss_.mix_hash(ByteView(e_.public_key.b.data(), 32));
    ss_.mix_key(x25519(e_.secret_key, re_));                      // ee
    ss_.mix_key(x25519(e_.secret_key, rs_));                      // se (responder side)
    Bytes enc_payload = ss_.encrypt_and_hash(payload);
    Bytes out(e_.public_key.b.begin(), e_.public_key.b.end());
    out.insert(out.end(), enc_payload.begin(), enc_payload.end());
    return out;
  }

  Bytes read_message_2(ByteView msg) {
    if (msg.size() < 32 + kAeadTagLen) throw AuthError("noise: message 2 too short");
    Key32 re;
    std::memcpy(re.b.data(), msg.data(), 32);
    re_ = re;
    ss_.mix_hash(ByteView(re.b.data(), 32));
    ss_.mix_key(x25519(e_.secret_key, re));                       // ee
    ss_.mix_key(x25519(s_.secret_key, re));                       // se (initiator side)
    return ss_.decrypt_and_hash(msg.subspan(32));
  }

  TransportKeys transport_keys() const {
    auto [k1, k2] = ss_.split();
    return initiator_ ? TransportKeys{k1, k2} : TransportKeys{k2, k1};
  }

  const Key32& remote_static() const { return rs_; }

 private:
  Handshake() = default;

  bool initiator_ = false;
  KeyPair s_;
  KeyPair e_;
  Key32 rs_;  // remote static (known a priori for initiator, learned for responder)
  Key32 re_;  // remote ephemeral
  SymmetricState ss_;
};

}  // namespace noise
}  // namespace fogmesh
