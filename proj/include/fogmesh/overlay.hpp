#pragma once

#include <atomic>
#include <condition_variable>
#include <cstring>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "fogmesh/bytes.hpp"
#include "fogmesh/crypto.hpp"
#include "fogmesh/errors.hpp"
#include "fogmesh/executor.hpp"
#include "fogmesh/net.hpp"
#include "fogmesh/noise.hpp"

namespace fogmesh {

inline constexpr std::size_t kMaxOverlayPayload = 1200;
inline constexpr std::size_t kDatagramHeaderLen = 12;
// Header + AEAD tag: what sealing adds to a plaintext on the wire.
inline constexpr std::size_t kSealOverhead = kDatagramHeaderLen + 16;
inline constexpr std::uint64_t kRekeyThreshold = 1ull << 60;

// Sliding 64-entry anti-replay bitmap over received counters. Bit i of the
// bitmap stands for counter (high - i). Counter 0 is never sent, so the
// initial state (high=0, bit 0 set) rejects it unconditionally.
class ReplayWindow {
 public:
  bool accept(std::uint64_t counter) {
    if (counter > high_) {
      std::uint64_t shift = counter - high_;
      bitmap_ = shift >= 64 ? 0 : bitmap_ << shift;
      bitmap_ |= 1;
      high_ = counter;
      return true;
    }
    std::uint64_t age = high_ - counter;
    if (age >= 64) return false;
    std::uint64_t bit = 1ull << age;
    if (bitmap_ & bit) return false;
    bitmap_ |= bit;
    return true;
  }

  std::uint64_t high() const { return high_; }

 private:
  std::uint64_t high_ = 0;
  std::uint64_t bitmap_ = 1;
};

// Established per-peer state. seal/open are safe to call from multiple
// threads: counter allocation is a fetch_add, window updates take a mutex.
class TunnelSession {
 public:
  TunnelSession(Key32 peer_public, noise::TransportKeys keys, std::uint32_t local_index,
                std::uint32_t peer_index, Endpoint peer_endpoint)
      : peer_public_(peer_public),
        send_key_(keys.send_key),
        recv_key_(keys.recv_key),
        local_index_(local_index),
        peer_index_(peer_index),
        peer_endpoint_(std::move(peer_endpoint)) {}

  Bytes seal(ByteView plaintext) {
    if (plaintext.size() > kMaxOverlayPayload)
      throw ValidationError("overlay: payload exceeds 1200 bytes");
    std::uint64_t counter = send_counter_.fetch_add(1, std::memory_order_relaxed) + 1;
    if (counter >= kRekeyThreshold) {
      expired_.store(true, std::memory_order_relaxed);
      throw Error("overlay: send counter exhausted, rekey required");
    }
    ByteWriter header;
    header.u32(peer_index_);
    header.u64(counter);
    Bytes out = header.take();
    Bytes ct = aead_seal(send_key_, counter_nonce(counter), ByteView(out.data(), out.size()),
                         plaintext);
    out.insert(out.end(), ct.begin(), ct.end());
    return out;
  }

  // Expects the full datagram including the 12-byte header addressed to
  // local_index. Throws AuthError on tag failure, ReplayError on duplicates
  // or counters that fell out of the window.
  Bytes open(ByteView datagram) {
    if (datagram.size() < kDatagramHeaderLen + kAeadTagLen)
      throw AuthError("overlay: datagram shorter than header+tag");
    ByteReader rd(datagram);
    std::uint32_t index = rd.u32();
    std::uint64_t counter = rd.u64();
    if (index != local_index_) throw AuthError("overlay: unknown session index");
    auto pt = aead_open(recv_key_, counter_nonce(counter),
                        datagram.subspan(0, kDatagramHeaderLen),
                        datagram.subspan(kDatagramHeaderLen));
    if (!pt) throw AuthError("overlay: datagram authentication failed");
    {
      std::lock_guard lk(window_mu_);
      if (!window_.accept(counter)) throw ReplayError("overlay: replayed counter");
    }
    return std::move(*pt);
  }

  const Key32& peer_public() const { return peer_public_; }
  std::uint32_t local_index() const { return local_index_; }
  std::uint32_t peer_index() const { return peer_index_; }
  const Endpoint& peer_endpoint() const { return peer_endpoint_; }
  void set_peer_endpoint(Endpoint ep) { peer_endpoint_ = std::move(ep); }
  std::uint64_t send_counter() const { return send_counter_.load(std::memory_order_relaxed); }
  bool expired() const { return expired_.load(std::memory_order_relaxed); }

 private:
  Key32 peer_public_;
  Key32 send_key_;
  Key32 recv_key_;
  std::uint32_t local_index_;
  std::uint32_t peer_index_;
  Endpoint peer_endpoint_;
  std::atomic<std::uint64_t> send_counter_{0};
  std::atomic<bool> expired_{false};
  std::mutex window_mu_;
  ReplayWindow window_;
};

// --- overlay addressing -----------------------------------------------------

struct OverlayAddress {
  std::uint16_t host_id = 0;

  std::string str() const {
    return "10.42." + std::to_string(host_id >> 8) + "." + std::to_string(host_id & 0xff);
  }
};

inline constexpr const char* kRobotMachineName = "robot";

// Robot is always host 1; machines get sequential ids in the given (plan)
// order. Deterministic for a fixed machine list.
inline std::map<std::string, OverlayAddress> assign_overlay_addresses(
    const std::vector<std::string>& machines) {
  if (machines.size() > 65533) throw CapacityError("overlay: address space exhausted");
  std::map<std::string, OverlayAddress> out;
  out[kRobotMachineName] = OverlayAddress{1};
  std::uint16_t next = 2;
  for (const auto& m : machines) {
    if (m == kRobotMachineName) continue;
    out[m] = OverlayAddress{next++};
  }
  return out;
}

struct WireguardNode {
  std::string name;
  std::uint16_t host_id = 0;
  Key32 public_key;
  Endpoint endpoint;  // "host:port"; empty for unreachable-from-outside peers
};

// Standard INI-style documents (one per node) describing the same topology.
// Text only; private keys are never emitted.
inline std::map<std::string, std::string> export_wireguard_config(
    const std::vector<WireguardNode>& nodes,
    const std::vector<std::pair<std::string, std::string>>& edges) {
  std::map<std::string, const WireguardNode*> by_name;
  for (const auto& n : nodes) by_name[n.name] = &n;
  std::map<std::string, std::string> docs;
  for (const auto& n : nodes) {
    std::string doc;
    doc += "[Interface]\n";
    doc += "# " + n.name + "\n";
    doc += "Address = " + OverlayAddress{n.host_id}.str() + "/16\n";
    auto colon = n.endpoint.rfind(':');
    if (colon != std::string::npos)
      doc += "ListenPort = " + n.endpoint.substr(colon + 1) + "\n";
    for (const auto& [a, b] : edges) {
      const std::string* other = nullptr;
      if (a == n.name) other = &b;
      else if (b == n.name) other = &a;
      if (!other) continue;
      auto it = by_name.find(*other);
      if (it == by_name.end()) continue;
      const WireguardNode& p = *it->second;
      doc += "\n[Peer]\n";
      doc += "# " + p.name + "\n";
      doc += "PublicKey = " + p.public_key.base64() + "\n";
      doc += "AllowedIPs = " + OverlayAddress{p.host_id}.str() + "/32\n";
      if (!p.endpoint.empty()) doc += "Endpoint = " + p.endpoint + "\n";
    }
    docs[n.name] = doc;
  }
  return docs;
}

// --- mesh -------------------------------------------------------------------

// Handshake framing on the reserved index-0 channel:
//   initiation: u32(0) u8(1) u32(initiator_index) noise_msg1(96)
//   response:   u32(0) u8(2) u32(initiator_index) u32(responder_index) noise_msg2(48)
inline constexpr std::uint8_t kHandshakeInitiation = 1;
inline constexpr std::uint8_t kHandshakeResponse = 2;

// Manages sessions over one datagram socket: initiates and answers
// handshakes, dispatches inbound datagrams by session index, and applies an
// optional per-peer link shaper on the send path. All internal state is
// touched only on the executor thread; public entry points hop there.
class Mesh {
 public:
  struct Config {
    KeyPair identity;
    Micros handshake_retry_interval = 300'000;
    int handshake_retries = 5;
    std::uint64_t index_seed = 0;  // 0: randomize
  };

  using ReceiveHandler = std::function<void(const Key32& peer, ByteView plaintext)>;
  using Sniffer = std::function<void(ByteView datagram)>;
  using EstablishedCallback = std::function<void(bool ok)>;

  Mesh(Executor& ex, DatagramSocket& socket, Config cfg)
      : ex_(ex), socket_(socket), cfg_(std::move(cfg)),
        rng_(cfg_.index_seed ? cfg_.index_seed : monotonic_now() ^ 0x9e3779b97f4a7c15ull) {
    socket_.set_handler([this](const Endpoint& from, ByteView data) { on_datagram(from, data); });
  }

  const Key32& public_key() const { return cfg_.identity.public_key; }
  Endpoint local_endpoint() const { return socket_.local_endpoint(); }

  void set_receive_handler(ReceiveHandler h) { receive_ = std::move(h); }
  void set_sniffer(Sniffer s) { sniffer_ = std::move(s); }

  // Detaches the mesh from the world: pending handshakes abort (their
  // callbacks fire with false), incoming datagrams are dropped, nothing is
  // delivered upward anymore. Synchronous and safe from any thread.
  void stop() {
    fogmesh::run_on_executor(ex_, [this] {
      if (stopped_) return;
      stopped_ = true;
      receive_ = nullptr;
      auto pending = std::move(pending_);
      pending_.clear();
      for (auto& [idx, p] : pending) {
        if (p->done) continue;
        p->done = true;
        ex_.cancel(p->timer);
        p->notify(false);
      }
    });
  }

  void allow_peer(const Key32& peer_public) {
    run_on_executor([this, peer_public] { allowed_.insert(peer_public); });
  }

  void set_link_model(const Key32& peer_public, const LinkModel& model, std::uint64_t seed) {
    run_on_executor([this, peer_public, model, seed] {
      shapers_[peer_public] = std::make_unique<LinkShaper>(model, seed);
    });
  }

  // Initiates a handshake; cb(true) once the session is established, cb(false)
  // after the retry budget is exhausted. Re-connecting an established peer
  // reports success immediately.
  void connect(const Key32& peer_public, const Endpoint& endpoint, EstablishedCallback cb) {
    run_on_executor([this, peer_public, endpoint, cb = std::move(cb)]() mutable {
      if (session_for(peer_public)) {
        if (cb) cb(true);
        return;
      }
      for (auto& [idx, p] : pending_) {
        if (p->peer_public == peer_public) {
          if (cb) p->extra_callbacks.push_back(std::move(cb));
          return;
        }
      }
      allowed_.insert(peer_public);
      auto pending = std::make_shared<Pending>();
      pending->peer_public = peer_public;
      pending->endpoint = endpoint;
      pending->local_index = fresh_index();
      pending->handshake = std::make_unique<noise::Handshake>(
          noise::Handshake::make_initiator(cfg_.identity, peer_public));
      pending->callback = std::move(cb);
      ByteWriter w;
      w.u32(0);
      w.u8(kHandshakeInitiation);
      w.u32(pending->local_index);
      w.raw(pending->handshake->write_message_1());
      pending->message1 = w.take();
      pending_[pending->local_index] = pending;
      send_handshake_attempt(pending);
    });
  }

  void send(const Key32& peer_public, Bytes plaintext) {
    run_on_executor([this, peer_public, plaintext = std::move(plaintext)] {
      TunnelSession* s = session_for(peer_public);
      if (!s) {
        ++drops_no_session_;
        return;
      }
      emit(*s, ByteView(plaintext.data(), plaintext.size()));
    });
  }

  // Bytes the send path toward a peer can absorb right now without tail
  // drops. Unlimited for unshaped links. Senders use this to drop a message
  // whole instead of letting the queue truncate it into useless fragments.
  std::uint64_t send_headroom_bytes(const Key32& peer_public) {
    auto compute = [this, &peer_public] {
      auto sh = shapers_.find(peer_public);
      if (sh == shapers_.end()) return std::numeric_limits<std::uint64_t>::max();
      return sh->second->headroom_bits(ex_.now()) / 8;
    };
    if (ex_.on_executor_thread()) return compute();
    std::uint64_t out = 0;
    std::mutex mu;
    std::condition_variable cv;
    bool done = false;
    ex_.post([&] {
      out = compute();
      std::lock_guard lk(mu);
      done = true;
      cv.notify_one();
    });
    std::unique_lock lk(mu);
    cv.wait(lk, [&] { return done; });
    return out;
  }

  struct LinkStats {
    std::uint64_t bytes_on_wire = 0;
    std::uint64_t tail_drops = 0;
    std::uint64_t loss_drops = 0;
  };

  // Counters of the emulated link toward a peer; zeros when unshaped.
  LinkStats link_stats(const Key32& peer_public) {
    auto compute = [this, &peer_public] {
      LinkStats st;
      auto sh = shapers_.find(peer_public);
      if (sh != shapers_.end()) {
        st.bytes_on_wire = sh->second->bytes_on_wire();
        st.tail_drops = sh->second->tail_drops();
        st.loss_drops = sh->second->loss_drops();
      }
      return st;
    };
    if (ex_.on_executor_thread()) return compute();
    LinkStats out;
    std::mutex mu;
    std::condition_variable cv;
    bool done = false;
    ex_.post([&] {
      out = compute();
      std::lock_guard lk(mu);
      done = true;
      cv.notify_one();
    });
    std::unique_lock lk(mu);
    cv.wait(lk, [&] { return done; });
    return out;
  }

  bool has_session(const Key32& peer_public) {
    bool out = false;
    if (ex_.on_executor_thread()) return session_for(peer_public) != nullptr;
    std::mutex mu;
    std::condition_variable cv;
    bool done = false;
    ex_.post([&] {
      out = session_for(peer_public) != nullptr;
      std::lock_guard lk(mu);
      done = true;
      cv.notify_one();
    });
    std::unique_lock lk(mu);
    cv.wait(lk, [&] { return done; });
    return out;
  }

  struct Stats {
    std::uint64_t auth_failures = 0;
    std::uint64_t replay_rejections = 0;
    std::uint64_t unknown_index = 0;
    std::uint64_t drops_no_session = 0;
    std::uint64_t shaper_drops = 0;
    std::uint64_t seal_failures = 0;
    std::uint64_t datagrams_out = 0;
    std::uint64_t datagrams_in = 0;
  };

  Stats stats() const {
    return Stats{auth_failures_, replay_rejections_,  unknown_index_, drops_no_session_,
                 shaper_drops_,  seal_failures_,      datagrams_out_, datagrams_in_};
  }

 private:
  struct Pending {
    Key32 peer_public;
    Endpoint endpoint;
    std::uint32_t local_index = 0;
    std::unique_ptr<noise::Handshake> handshake;
    Bytes message1;
    EstablishedCallback callback;
    std::vector<EstablishedCallback> extra_callbacks;
    int attempts = 0;
    std::uint64_t timer = 0;
    bool done = false;

    void notify(bool ok) {
      if (callback) callback(ok);
      for (auto& cb : extra_callbacks)
        if (cb) cb(ok);
    }
  };

  void run_on_executor(std::function<void()> fn) {
    if (ex_.on_executor_thread()) fn();
    else ex_.post(std::move(fn));
  }

  std::uint32_t fresh_index() {
    for (;;) {
      auto idx = static_cast<std::uint32_t>(rng_.below(0xffffffffull) + 1);
      if (!sessions_.count(idx) && !pending_.count(idx)) return idx;
    }
  }

  TunnelSession* session_for(const Key32& peer_public) {
    auto it = session_by_peer_.find(peer_public);
    return it == session_by_peer_.end() ? nullptr : it->second;
  }

  void send_handshake_attempt(const std::shared_ptr<Pending>& p) {
    if (p->done) return;
    if (p->attempts >= cfg_.handshake_retries) {
      p->done = true;
      pending_.erase(p->local_index);
      p->notify(false);
      return;
    }
    ++p->attempts;
    wire_send(p->endpoint, ByteView(p->message1.data(), p->message1.size()), nullptr);
    p->timer = ex_.schedule_after(cfg_.handshake_retry_interval,
                                  [this, p] { send_handshake_attempt(p); });
  }

  void on_datagram(const Endpoint& from, ByteView data) {
    ++datagrams_in_;
    if (stopped_ || data.size() < 4) return;
    std::uint32_t index = (std::uint32_t(data[0]) << 24) | (std::uint32_t(data[1]) << 16) |
                          (std::uint32_t(data[2]) << 8) | std::uint32_t(data[3]);
    if (index == 0) {
      handle_handshake(from, data);
      return;
    }
    auto it = sessions_.find(index);
    if (it == sessions_.end()) {
      ++unknown_index_;
      return;
    }
    TunnelSession& s = *it->second;
    Bytes plaintext;
    try {
      plaintext = s.open(data);
    } catch (const ReplayError&) {
      ++replay_rejections_;
      return;
    } catch (const AuthError&) {
      ++auth_failures_;
      return;
    }
    s.set_peer_endpoint(from);
    if (receive_) receive_(s.peer_public(), ByteView(plaintext.data(), plaintext.size()));
  }

  void handle_handshake(const Endpoint& from, ByteView data) {
    try {
      ByteReader rd(data);
      rd.u32();
      std::uint8_t type = rd.u8();
      if (type == kHandshakeInitiation) {
        std::uint32_t initiator_index = rd.u32();
        auto hs = noise::Handshake::make_responder(cfg_.identity);
        hs.read_message_1(data.subspan(9));
        if (!allowed_.count(hs.remote_static())) {
          ++auth_failures_;
          return;
        }
        // A retransmitted initiation must get a response matching the session
        // already installed for it, not a freshly keyed one.
        auto resend = responded_.find(hs.remote_static());
        if (resend != responded_.end() && resend->second.initiator_index == initiator_index) {
          wire_send(from, ByteView(resend->second.response.data(),
                                   resend->second.response.size()), nullptr);
          return;
        }
        std::uint32_t local_index = fresh_index();
        Bytes msg2 = hs.write_message_2();
        auto keys = hs.transport_keys();
        install_session(hs.remote_static(), keys, local_index, initiator_index, from);
        ByteWriter w;
        w.u32(0);
        w.u8(kHandshakeResponse);
        w.u32(initiator_index);
        w.u32(local_index);
        w.raw(msg2);
        Bytes packet = w.take();
        responded_[hs.remote_static()] = Responded{initiator_index, packet};
        wire_send(from, ByteView(packet.data(), packet.size()), nullptr);
      } else if (type == kHandshakeResponse) {
        std::uint32_t initiator_index = rd.u32();
        std::uint32_t responder_index = rd.u32();
        auto it = pending_.find(initiator_index);
        if (it == pending_.end()) return;
        auto p = it->second;
        p->handshake->read_message_2(data.subspan(13));
        auto keys = p->handshake->transport_keys();
        p->done = true;
        ex_.cancel(p->timer);
        pending_.erase(it);
        install_session(p->peer_public, keys, p->local_index, responder_index, from);
        p->notify(true);
      }
    } catch (const Error&) {
      ++auth_failures_;
    }
  }

  void install_session(const Key32& peer, const noise::TransportKeys& keys,
                       std::uint32_t local_index, std::uint32_t peer_index,
                       const Endpoint& endpoint) {
    auto old = session_by_peer_.find(peer);
    if (old != session_by_peer_.end()) sessions_.erase(old->second->local_index());
    auto session = std::make_unique<TunnelSession>(peer, keys, local_index, peer_index, endpoint);
    session_by_peer_[peer] = session.get();
    sessions_[local_index] = std::move(session);
  }

  void emit(TunnelSession& s, ByteView plaintext) {
    Bytes datagram;
    try {
      datagram = s.seal(plaintext);
    } catch (const Error&) {
      ++seal_failures_;
      return;
    }
    wire_send(s.peer_endpoint(), ByteView(datagram.data(), datagram.size()), &s.peer_public());
  }

  void wire_send(const Endpoint& to, ByteView datagram, const Key32* peer) {
    if (peer) {
      auto sh = shapers_.find(*peer);
      if (sh != shapers_.end()) {
        auto outcome = sh->second->offer(ex_.now(), datagram.size() * 8);
        if (outcome.kind != LinkShaper::Outcome::kDelivered) {
          ++shaper_drops_;
          return;
        }
        Bytes copy(datagram.begin(), datagram.end());
        ex_.schedule_at(outcome.deliver_at, [this, to, copy = std::move(copy)] {
          ++datagrams_out_;
          if (sniffer_) sniffer_(ByteView(copy.data(), copy.size()));
          socket_.send(to, ByteView(copy.data(), copy.size()));
        });
        return;
      }
    }
    ++datagrams_out_;
    if (sniffer_) sniffer_(datagram);
    socket_.send(to, datagram);
  }

  struct Responded {
    std::uint32_t initiator_index = 0;
    Bytes response;
  };

  Executor& ex_;
  DatagramSocket& socket_;
  Config cfg_;
  Rng rng_;
  ReceiveHandler receive_;
  Sniffer sniffer_;
  std::set<Key32> allowed_;
  std::map<std::uint32_t, std::unique_ptr<TunnelSession>> sessions_;
  std::map<Key32, TunnelSession*> session_by_peer_;
  std::map<std::uint32_t, std::shared_ptr<Pending>> pending_;
  bool stopped_ = false;
  std::map<Key32, Responded> responded_;
  std::map<Key32, std::unique_ptr<LinkShaper>> shapers_;
  std::uint64_t auth_failures_ = 0;
  std::uint64_t replay_rejections_ = 0;
  std::uint64_t unknown_index_ = 0;
  std::uint64_t drops_no_session_ = 0;
  std::uint64_t shaper_drops_ = 0;
  std::uint64_t seal_failures_ = 0;
  std::uint64_t datagrams_out_ = 0;
  std::uint64_t datagrams_in_ = 0;
};

}  // namespace fogmesh
