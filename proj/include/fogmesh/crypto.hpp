#pragma once

#include <sodium.h>

#include <array>
#include <cstring>
#include <optional>
#include <string>

#include "fogmesh/bytes.hpp"
#include "fogmesh/errors.hpp"

namespace fogmesh {

inline void crypto_init() {
  static const bool ok = [] { return sodium_init() >= 0; }();
  if (!ok) throw Error("libsodium init failed");
}

struct Key32 {
  std::array<std::uint8_t, 32> b{};

  bool operator==(const Key32&) const = default;
  auto operator<=>(const Key32&) const = default;
  bool is_zero() const {
    for (auto v : b)
      if (v) return false;
    return true;
  }
  std::string hex() const { return to_hex(ByteView(b.data(), b.size())); }
  static Key32 from_hex_str(const std::string& s) {
    Bytes raw = from_hex(s);
    if (raw.size() != 32) throw Error("key must be 32 bytes");
    Key32 k;
    std::memcpy(k.b.data(), raw.data(), 32);
    return k;
  }
  std::string base64() const {
    char out[sodium_base64_ENCODED_LEN(32, sodium_base64_VARIANT_ORIGINAL)];
    sodium_bin2base64(out, sizeof out, b.data(), 32, sodium_base64_VARIANT_ORIGINAL);
    return out;
  }
};

// X25519 static/ephemeral key pair. The secret never leaves the process that
// generated it except over the provisioning channel at boot.
struct KeyPair {
  Key32 public_key;
  Key32 secret_key;
};

inline Key32 x25519_public(const Key32& secret) {
  crypto_init();
  Key32 pub;
  crypto_scalarmult_base(pub.b.data(), secret.b.data());
  return pub;
}

inline KeyPair generate_keypair() {
  crypto_init();
  KeyPair kp;
  randombytes_buf(kp.secret_key.b.data(), 32);
  kp.public_key = x25519_public(kp.secret_key);
  return kp;
}

// Deterministic variant for tests: secret derived from the seed by hashing.
inline KeyPair generate_keypair(std::uint64_t seed) {
  crypto_init();
  KeyPair kp;
  std::uint8_t in[8];
  for (int i = 0; i < 8; ++i) in[i] = static_cast<std::uint8_t>(seed >> (8 * i));
  crypto_generichash(kp.secret_key.b.data(), 32, in, sizeof in, nullptr, 0);
  kp.public_key = x25519_public(kp.secret_key);
  return kp;
}

inline Key32 x25519(const Key32& secret, const Key32& peer_public) {
  crypto_init();
  Key32 shared;
  if (crypto_scalarmult(shared.b.data(), secret.b.data(), peer_public.b.data()) != 0)
    throw AuthError("x25519: degenerate shared secret");
  return shared;
}

inline constexpr std::size_t kAeadTagLen = 16;

// ChaCha20-Poly1305 (IETF). Nonce is the 64-bit counter big-endian in the low
// 8 bytes of the 12-byte nonce.
inline std::array<std::uint8_t, 12> counter_nonce(std::uint64_t counter) {
  std::array<std::uint8_t, 12> nonce{};
  for (int i = 0; i < 8; ++i)
    nonce[4 + i] = static_cast<std::uint8_t>(counter >> (56 - 8 * i));
  return nonce;
}

inline Bytes aead_seal(const Key32& key, const std::array<std::uint8_t, 12>& nonce, ByteView aad,
                       ByteView plaintext) {
  crypto_init();
  Bytes out(plaintext.size() + kAeadTagLen);
  unsigned long long outlen = 0;
  crypto_aead_chacha20poly1305_ietf_encrypt(out.data(), &outlen, plaintext.data(),
                                            plaintext.size(), aad.data(), aad.size(), nullptr,
                                            nonce.data(), key.b.data());
  out.resize(outlen);
  return out;
}

inline std::optional<Bytes> aead_open(const Key32& key, const std::array<std::uint8_t, 12>& nonce,
                                      ByteView aad, ByteView ciphertext) {
  crypto_init();
  if (ciphertext.size() < kAeadTagLen) return std::nullopt;
  Bytes out(ciphertext.size() - kAeadTagLen);
  unsigned long long outlen = 0;
  if (crypto_aead_chacha20poly1305_ietf_decrypt(out.data(), &outlen, nullptr, ciphertext.data(),
                                                ciphertext.size(), aad.data(), aad.size(),
                                                nonce.data(), key.b.data()) != 0)
    return std::nullopt;
  out.resize(outlen);
  return out;
}

inline Key32 sha256(ByteView data) {
  crypto_init();
  Key32 out;
  crypto_hash_sha256(out.b.data(), data.data(), data.size());
  return out;
}

inline Key32 hmac_sha256(const Key32& key, ByteView data) {
  crypto_init();
  Key32 out;
  crypto_auth_hmacsha256_state st;
  crypto_auth_hmacsha256_init(&st, key.b.data(), 32);
  crypto_auth_hmacsha256_update(&st, data.data(), data.size());
  crypto_auth_hmacsha256_final(&st, out.b.data());
  return out;
}

}  // namespace fogmesh
