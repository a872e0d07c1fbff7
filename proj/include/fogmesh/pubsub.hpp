#pragma once

#include <atomic>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "fogmesh/bytes.hpp"
#include "fogmesh/envelope.hpp"
#include "fogmesh/errors.hpp"
#include "fogmesh/executor.hpp"
#include "fogmesh/overlay.hpp"

namespace fogmesh {

struct Message {
  std::string topic;
  Bytes payload;
  std::uint64_t message_id = 0;
  std::uint64_t seq = 0;
  Micros publish_instant = 0;

  std::uint32_t publisher_uid() const { return static_cast<std::uint32_t>(message_id >> 32); }
};

class Router;

// A participant in the topic fabric. One dispatch context per node: callbacks
// run on the executor thread, never concurrently.
class Node {
 public:
  const std::string& name() const { return name_; }
  std::uint32_t uid() const { return uid_; }

  void advertise(const std::string& topic);
  void subscribe(const std::string& topic, DeliveryMode mode,
                 std::function<void(const Message&)> callback);
  // Returns the per-publisher sequence number. Callable from any thread.
  std::uint64_t publish(const std::string& topic, Bytes payload);

  // Delivers to subscribers on this machine only; never routed to peers.
  // Used by fan-in stages that reproduce a topic which already exists
  // elsewhere in the fabric, where re-routing would duplicate messages.
  std::uint64_t publish_local(const std::string& topic, Bytes payload);

  // Invoked when an acked publish exhausts its retries for at least one peer.
  void set_ack_failure_handler(std::function<void(const std::string&, std::uint64_t)> h) {
    ack_failure_ = std::move(h);
  }

 private:
  friend class Router;
  Node(Router& router, std::string name, std::uint32_t uid)
      : router_(router), name_(std::move(name)), uid_(uid) {}

  Router& router_;
  std::string name_;
  std::uint32_t uid_;
  std::atomic<std::uint64_t> seq_counter_{0};
  std::mutex mu_;  // guards advertised_ for cross-thread publish preconditions
  std::set<std::string> advertised_;
  std::function<void(const std::string&, std::uint64_t)> ack_failure_;
};

// Per-machine message fabric: local dispatch plus routing over the overlay
// mesh, discovery by periodic announcement beacons, fragmentation/reassembly,
// and ack-with-retry for topics subscribed in acked mode.
class Router {
 public:
  struct Config {
    std::string machine_name = "machine";
    std::uint16_t host_id = 0;
    Micros announce_interval = 1'000'000;
    Micros reassembly_timeout = 2'000'000;
    Micros ack_retry_interval = 500'000;
    int ack_max_retries = 3;
  };

  struct PeerEntry {
    std::uint16_t host_id = 0;
    std::map<std::string, DeliveryMode> topics;
    Micros refreshed_at = 0;
  };

  struct Stats {
    std::uint64_t published = 0;
    std::uint64_t delivered_local = 0;
    std::uint64_t delivered_remote = 0;
    std::uint64_t parse_errors = 0;
    std::uint64_t seq_drops = 0;
    std::uint64_t dedup_drops = 0;
    std::uint64_t reassembly_timeouts = 0;
    std::uint64_t acks_sent = 0;
    std::uint64_t ack_failures = 0;
    std::uint64_t beacons_sent = 0;
    std::uint64_t beacons_received = 0;
    std::uint64_t writer_drops = 0;
  };

  Router(Executor& ex, Mesh& mesh, Config cfg)
      : ex_(ex), mesh_(mesh), cfg_(std::move(cfg)) {
    mesh_.set_receive_handler(
        [this](const Key32& peer, ByteView plaintext) { on_plaintext(peer, plaintext); });
    announce_timer_ = ex_.schedule_after(cfg_.announce_interval, [this] { announce_tick(); });
    Micros gc = std::min<Micros>(cfg_.reassembly_timeout / 2, 500'000);
    gc_timer_ = ex_.schedule_after(gc, [this] { gc_tick(); });
  }

  ~Router() { stop(); }

  Router(const Router&) = delete;
  Router& operator=(const Router&) = delete;

  // Safe from any thread: the teardown runs on the executor so it cannot
  // interleave with a dispatch that is already inside the router.
  void stop() {
    run_on_executor(ex_, [this] {
      if (stopped_) return;
      stopped_ = true;
      ex_.cancel(announce_timer_);
      ex_.cancel(gc_timer_);
      for (auto& [id, o] : outstanding_) ex_.cancel(o.timer);
      mesh_.set_receive_handler(nullptr);
    });
  }

  Node* create_node(const std::string& name) {
    return run_sync([&]() -> Node* {
      auto uid = static_cast<std::uint32_t>(cfg_.host_id) << 16 |
                 static_cast<std::uint32_t>(++node_counter_);
      nodes_.push_back(std::unique_ptr<Node>(new Node(*this, name, uid)));
      return nodes_.back().get();
    });
  }

  // Registers an established overlay peer as a routing target. Topic
  // knowledge arrives with its beacons.
  void add_peer(const Key32& peer_public, std::uint16_t host_id) {
    run_sync([&] {
      auto& e = peers_[peer_public];
      e.host_id = host_id;
      e.refreshed_at = ex_.now();
      send_beacon_to(peer_public);
      return 0;
    });
  }

  void remove_peer(const Key32& peer_public) {
    run_sync([&] {
      peers_.erase(peer_public);
      for (auto it = outstanding_.begin(); it != outstanding_.end();) {
        it->second.pending.erase(peer_public);
        if (it->second.pending.empty()) {
          ex_.cancel(it->second.timer);
          it = outstanding_.erase(it);
        } else {
          ++it;
        }
      }
      return 0;
    });
  }

  std::map<Key32, PeerEntry> peers() {
    return run_sync([&] { return peers_; });
  }

  Stats stats() {
    return run_sync([&] { return stats_; });
  }

  // Every topic this router has seen carry traffic (published here or
  // received from a peer). Feeds wildcard subscription discovery.
  std::set<std::string> observed_topics() {
    return run_sync([&] { return observed_; });
  }

  const Config& config() const { return cfg_; }
  Executor& executor() { return ex_; }
  Mesh& mesh() { return mesh_; }

 private:
  friend class Node;

  struct SubEntry {
    std::uint32_t node_uid = 0;
    DeliveryMode mode = DeliveryMode::kBestEffort;
    std::function<void(const Message&)> callback;
  };

  struct Reassembly {
    std::uint64_t seq = 0;
    Micros publish_instant = 0;
    std::string topic;
    Key32 from;
    std::vector<std::optional<Bytes>> frags;
    std::size_t received = 0;
    Micros deadline = 0;
  };

  struct Outstanding {
    std::string topic;
    std::uint32_t publisher_uid = 0;
    std::vector<Bytes> fragments;  // serialized envelopes
    std::set<Key32> pending;
    int attempts = 1;
    std::uint64_t timer = 0;
  };

  template <typename Fn>
  auto run_sync(Fn&& fn) -> decltype(fn()) {
    if (ex_.on_executor_thread()) return fn();
    using R = decltype(fn());
    std::mutex mu;
    std::condition_variable cv;
    bool done = false;
    std::exception_ptr err;
    std::optional<R> out;
    ex_.post([&] {
      try {
        out.emplace(fn());
      } catch (...) {
        err = std::current_exception();
      }
      std::lock_guard lk(mu);
      done = true;
      cv.notify_one();
    });
    std::unique_lock lk(mu);
    cv.wait(lk, [&] { return done; });
    if (err) std::rethrow_exception(err);
    return std::move(*out);
  }

  static void check_topic(const std::string& topic) {
    if (topic.empty()) throw ValidationError("pubsub: empty topic name");
    if (topic.size() > kMaxTopicLen) throw ValidationError("pubsub: topic name too long");
  }

  void do_subscribe(Node& n, const std::string& topic, DeliveryMode mode,
                    std::function<void(const Message&)> cb) {
    check_topic(topic);
    for (const auto& s : local_subs_[topic])
      if (s.node_uid == n.uid())
        throw ValidationError("pubsub: node already subscribed to " + topic);
    local_subs_[topic].push_back(SubEntry{n.uid(), mode, std::move(cb)});
    broadcast_beacon();
  }

  void route_local(Node& n, const std::string& topic, Bytes payload, std::uint64_t seq) {
    ++stats_.published;
    observed_.insert(topic);
    std::uint64_t message_id =
        static_cast<std::uint64_t>(n.uid()) << 32 | (seq & 0xffffffffull);
    Message m{topic, std::move(payload), message_id, seq, ex_.now()};
    deliver_local(m);
  }

  // The whole remote+local routing pass for one published message.
  void route(Node& n, const std::string& topic, Bytes payload, std::uint64_t seq) {
    ++stats_.published;
    observed_.insert(topic);
    std::uint64_t message_id =
        static_cast<std::uint64_t>(n.uid()) << 32 | (seq & 0xffffffffull);
    Micros instant = ex_.now();
    Message m{topic, std::move(payload), message_id, seq, instant};
    deliver_local(m);

    std::vector<Key32> targets;
    std::set<Key32> acked_targets;
    Micros fresh_horizon = 5 * cfg_.announce_interval;
    for (const auto& [key, entry] : peers_) {
      auto it = entry.topics.find(topic);
      if (it == entry.topics.end()) continue;
      if (ex_.now() - entry.refreshed_at >= fresh_horizon) continue;
      targets.push_back(key);
      if (it->second == DeliveryMode::kAcked) acked_targets.insert(key);
    }
    if (targets.empty()) return;

    std::size_t max_frag = max_fragment_payload(topic);
    std::size_t total = m.payload.size();
    auto frag_count = static_cast<std::uint16_t>(
        total == 0 ? 1 : (total + max_frag - 1) / max_frag);
    std::vector<Bytes> fragments;
    fragments.reserve(frag_count);
    for (std::uint16_t i = 0; i < frag_count; ++i) {
      Envelope e;
      e.kind = EnvelopeKind::kData;
      e.topic = topic;
      e.message_id = message_id;
      e.seq = seq;
      e.publish_instant = instant;
      e.frag_index = i;
      e.frag_count = frag_count;
      std::size_t off = static_cast<std::size_t>(i) * max_frag;
      std::size_t len = std::min(max_frag, total - off);
      e.payload.assign(m.payload.begin() + off, m.payload.begin() + off + len);
      fragments.push_back(serialize_envelope(e));
    }
    for (const auto& peer : targets) {
      // Best-effort admission: a message the peer's link queue cannot absorb
      // whole is dropped here at the writer, never truncated into useless
      // fragment heads at the queue tail. Acked traffic skips the check; it
      // is small and the retry loop owns its fate.
      if (!acked_targets.count(peer)) {
        std::uint64_t wire = 0;
        for (const auto& f : fragments) wire += f.size() + kSealOverhead;
        if (wire > mesh_.send_headroom_bytes(peer)) {
          ++stats_.writer_drops;
          continue;
        }
      }
      for (const auto& f : fragments) mesh_.send(peer, f);
    }
    ++stats_.delivered_remote;

    if (!acked_targets.empty()) {
      Outstanding o;
      o.topic = topic;
      o.publisher_uid = n.uid();
      o.fragments = std::move(fragments);
      o.pending = std::move(acked_targets);
      o.timer = ex_.schedule_after(cfg_.ack_retry_interval,
                                   [this, message_id] { retry_tick(message_id); });
      outstanding_[message_id] = std::move(o);
    }
  }

  void deliver_local(const Message& m) {
    auto it = local_subs_.find(m.topic);
    if (it == local_subs_.end()) return;
    auto subs = it->second;  // copy: callbacks may re-enter subscribe/publish
    for (auto& s : subs) {
      s.callback(m);
      ++stats_.delivered_local;
    }
  }

  void on_plaintext(const Key32& peer, ByteView plaintext) {
    Envelope e;
    try {
      e = parse_envelope(plaintext);
    } catch (const ParseError&) {
      ++stats_.parse_errors;
      return;
    }
    switch (e.kind) {
      case EnvelopeKind::kBeacon: {
        try {
          BeaconBody b = parse_beacon(ByteView(e.payload.data(), e.payload.size()));
          bool first_contact = !peers_.count(peer);
          auto& entry = peers_[peer];
          entry.host_id = b.host_id;
          entry.topics.clear();
          for (auto& [t, mode] : b.topics) entry.topics[t] = mode;
          entry.refreshed_at = ex_.now();
          ++stats_.beacons_received;
          // Answer a first beacon right away: both sides then know each
          // other's subscriptions after one round trip instead of waiting
          // out a beacon interval.
          if (first_contact) send_beacon_to(peer);
        } catch (const ParseError&) {
          ++stats_.parse_errors;
        }
        break;
      }
      case EnvelopeKind::kAck: {
        auto it = outstanding_.find(e.message_id);
        if (it == outstanding_.end()) break;
        it->second.pending.erase(peer);
        if (it->second.pending.empty()) {
          ex_.cancel(it->second.timer);
          outstanding_.erase(it);
        }
        break;
      }
      case EnvelopeKind::kData:
        handle_data(peer, std::move(e));
        break;
    }
  }

  void handle_data(const Key32& peer, Envelope e) {
    observed_.insert(e.topic);
    if (e.frag_count == 1) {
      finish_message(peer, e.message_id, e.topic, e.seq, e.publish_instant,
                     std::move(e.payload));
      return;
    }
    auto& r = reasm_[e.message_id];
    if (r.frags.empty()) {
      r.seq = e.seq;
      r.publish_instant = e.publish_instant;
      r.topic = e.topic;
      r.from = peer;
      r.frags.resize(e.frag_count);
      r.deadline = ex_.now() + cfg_.reassembly_timeout;
    }
    if (e.frag_index >= r.frags.size() || r.frags[e.frag_index]) return;
    r.frags[e.frag_index] = std::move(e.payload);
    if (++r.received < r.frags.size()) return;
    Bytes full;
    for (auto& f : r.frags) full.insert(full.end(), f->begin(), f->end());
    auto msg_id = e.message_id;
    auto topic = std::move(r.topic);
    auto seq = r.seq;
    auto instant = r.publish_instant;
    reasm_.erase(msg_id);
    finish_message(peer, msg_id, topic, seq, instant, std::move(full));
  }

  void finish_message(const Key32& peer, std::uint64_t message_id, const std::string& topic,
                      std::uint64_t seq, Micros instant, Bytes payload) {
    // Ack before dedup so a peer retrying after a lost ack gets its receipt.
    if (machine_mode(topic) == DeliveryMode::kAcked) send_ack(peer, message_id, topic, seq);
    if (processed_.count(message_id)) {
      ++stats_.dedup_drops;
      return;
    }
    remember_processed(message_id);
    auto key = std::make_pair(static_cast<std::uint32_t>(message_id >> 32), topic);
    auto it = seq_filter_.find(key);
    if (it != seq_filter_.end() && seq <= it->second) {
      ++stats_.seq_drops;
      return;
    }
    seq_filter_[key] = seq;
    deliver_local(Message{topic, std::move(payload), message_id, seq, instant});
  }

  DeliveryMode machine_mode(const std::string& topic) const {
    auto it = local_subs_.find(topic);
    if (it == local_subs_.end()) return DeliveryMode::kBestEffort;
    for (const auto& s : it->second)
      if (s.mode == DeliveryMode::kAcked) return DeliveryMode::kAcked;
    return DeliveryMode::kBestEffort;
  }

  void send_ack(const Key32& peer, std::uint64_t message_id, const std::string& topic,
                std::uint64_t seq) {
    Envelope ack;
    ack.kind = EnvelopeKind::kAck;
    ack.topic = topic;
    ack.message_id = message_id;
    ack.seq = seq;
    ack.publish_instant = ex_.now();
    mesh_.send(peer, serialize_envelope(ack));
    ++stats_.acks_sent;
  }

  void remember_processed(std::uint64_t message_id) {
    processed_.insert(message_id);
    processed_order_.push_back(message_id);
    while (processed_order_.size() > 8192) {
      processed_.erase(processed_order_.front());
      processed_order_.pop_front();
    }
  }

  void retry_tick(std::uint64_t message_id) {
    if (stopped_) return;
    auto it = outstanding_.find(message_id);
    if (it == outstanding_.end()) return;
    Outstanding& o = it->second;
    if (o.attempts > cfg_.ack_max_retries) {
      ++stats_.ack_failures;
      for (auto& n : nodes_) {
        if (n->uid() == o.publisher_uid && n->ack_failure_) {
          n->ack_failure_(o.topic, message_id);
          break;
        }
      }
      outstanding_.erase(it);
      return;
    }
    ++o.attempts;
    for (const auto& peer : o.pending)
      for (const auto& f : o.fragments) mesh_.send(peer, f);
    o.timer = ex_.schedule_after(cfg_.ack_retry_interval,
                                 [this, message_id] { retry_tick(message_id); });
  }

  BeaconBody current_beacon() const {
    BeaconBody b;
    b.host_id = cfg_.host_id;
    for (const auto& [topic, subs] : local_subs_) {
      if (subs.empty()) continue;
      DeliveryMode mode = DeliveryMode::kBestEffort;
      for (const auto& s : subs)
        if (s.mode == DeliveryMode::kAcked) mode = DeliveryMode::kAcked;
      b.topics.emplace_back(topic, mode);
    }
    return b;
  }

  void send_beacon_to(const Key32& peer) {
    Envelope e;
    e.kind = EnvelopeKind::kBeacon;
    e.publish_instant = ex_.now();
    e.payload = serialize_beacon(current_beacon());
    mesh_.send(peer, serialize_envelope(e));
    ++stats_.beacons_sent;
  }

  void broadcast_beacon() {
    for (const auto& [peer, entry] : peers_) send_beacon_to(peer);
  }

  void announce_tick() {
    if (stopped_) return;
    broadcast_beacon();
    announce_timer_ = ex_.schedule_after(cfg_.announce_interval, [this] { announce_tick(); });
  }

  void gc_tick() {
    if (stopped_) return;
    Micros now = ex_.now();
    for (auto it = reasm_.begin(); it != reasm_.end();) {
      if (now >= it->second.deadline) {
        ++stats_.reassembly_timeouts;
        it = reasm_.erase(it);
      } else {
        ++it;
      }
    }
    Micros gc = std::min<Micros>(cfg_.reassembly_timeout / 2, 500'000);
    gc_timer_ = ex_.schedule_after(gc, [this] { gc_tick(); });
  }

  Executor& ex_;
  Mesh& mesh_;
  Config cfg_;
  bool stopped_ = false;
  std::uint16_t node_counter_ = 0;
  std::vector<std::unique_ptr<Node>> nodes_;
  std::map<std::string, std::vector<SubEntry>> local_subs_;
  std::set<std::string> observed_;
  std::map<Key32, PeerEntry> peers_;
  std::map<std::pair<std::uint32_t, std::string>, std::uint64_t> seq_filter_;
  std::map<std::uint64_t, Reassembly> reasm_;
  std::set<std::uint64_t> processed_;
  std::deque<std::uint64_t> processed_order_;
  std::map<std::uint64_t, Outstanding> outstanding_;
  std::uint64_t announce_timer_ = 0;
  std::uint64_t gc_timer_ = 0;
  Stats stats_;
};

inline void Node::advertise(const std::string& topic) {
  Router::check_topic(topic);
  std::lock_guard lk(mu_);
  advertised_.insert(topic);
}

inline void Node::subscribe(const std::string& topic, DeliveryMode mode,
                            std::function<void(const Message&)> callback) {
  router_.run_sync([&] {
    router_.do_subscribe(*this, topic, mode, std::move(callback));
    return 0;
  });
}

inline std::uint64_t Node::publish(const std::string& topic, Bytes payload) {
  Router::check_topic(topic);
  {
    std::lock_guard lk(mu_);
    if (!advertised_.count(topic))
      throw ValidationError("pubsub: publish to unadvertised topic " + topic);
  }
  if (payload.size() > kMaxMessagePayload)
    throw CapacityError("pubsub: payload exceeds 64 MiB");
  std::uint64_t seq = seq_counter_.fetch_add(1, std::memory_order_relaxed) + 1;
  if (router_.ex_.on_executor_thread()) {
    router_.route(*this, topic, std::move(payload), seq);
  } else {
    router_.ex_.post([this, topic, payload = std::move(payload), seq]() mutable {
      router_.route(*this, topic, std::move(payload), seq);
    });
  }
  return seq;
}

inline std::uint64_t Node::publish_local(const std::string& topic, Bytes payload) {
  Router::check_topic(topic);
  if (payload.size() > kMaxMessagePayload)
    throw CapacityError("pubsub: payload exceeds 64 MiB");
  std::uint64_t seq = seq_counter_.fetch_add(1, std::memory_order_relaxed) + 1;
  if (router_.ex_.on_executor_thread()) {
    router_.route_local(*this, topic, std::move(payload), seq);
  } else {
    router_.ex_.post([this, topic, payload = std::move(payload), seq]() mutable {
      router_.route_local(*this, topic, std::move(payload), seq);
    });
  }
  return seq;
}

}  // namespace fogmesh
