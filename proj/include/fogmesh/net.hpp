#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>

#include "fogmesh/bytes.hpp"
#include "fogmesh/errors.hpp"
#include "fogmesh/executor.hpp"

namespace fogmesh {

// Endpoints are "host:port" strings; simulated hosts are arbitrary names,
// real ones are dotted quads.
using Endpoint = std::string;

using DatagramHandler = std::function<void(const Endpoint& from, Bytes data)>;

class DatagramSocket {
 public:
  virtual ~DatagramSocket() = default;
  virtual void send(const Endpoint& to, ByteView data) = 0;
  virtual void set_handler(DatagramHandler handler) = 0;
  virtual Endpoint local_endpoint() const = 0;
};

class Network {
 public:
  virtual ~Network() = default;
  // host is advisory for real UDP (always loopback); port 0 picks a free one.
  virtual std::unique_ptr<DatagramSocket> open(const std::string& host, std::uint16_t port) = 0;
};

// ---------------------------------------------------------------------------
// Link model and shaping

// One-way characteristics of an emulated network path.
struct LinkModel {
  double bandwidth_bps = 10e6;
  double propagation_delay_ms = 3.05;
  double loss_rate = 0.0;
};

// Pure arithmetic: instant a payload finishes arriving, or nullopt when the
// loss draw eats it.
inline std::optional<Micros> emulated_send(const LinkModel& link, std::uint64_t payload_bits,
                                           Micros now, Rng& rng) {
  if (payload_bits == 0) throw Error("emulated_send: payload_bits must be > 0");
  if (link.bandwidth_bps <= 0) throw Error("emulated_send: bandwidth must be > 0");
  if (link.loss_rate < 0 || link.loss_rate >= 1) throw Error("emulated_send: loss_rate out of range");
  if (link.loss_rate > 0 && rng.chance(link.loss_rate)) return std::nullopt;
  double seconds = link.propagation_delay_ms / 1e3 +
                   static_cast<double>(payload_bits) / link.bandwidth_bps;
  return now + static_cast<Micros>(seconds * 1e6 + 0.5);
}

// Stateful one-way shaper: serializes datagrams at the link rate, applies the
// propagation delay, draws losses from a seeded RNG, and bounds the queue by
// a bit budget. A datagram is only accepted when the entire queue (including
// it) fits the budget, so callers can keep multi-fragment messages intact by
// reserving the whole message up front.
class LinkShaper {
 public:
  LinkShaper() : rng_(1) {}
  LinkShaper(LinkModel model, std::uint64_t seed)
      : model_(model), rng_(seed), queue_budget_bits_(default_budget(model)) {}

  const LinkModel& model() const { return model_; }

  void set_queue_budget_bits(std::uint64_t bits) { queue_budget_bits_ = bits; }

  // Bits that could still be enqueued at `now` without exceeding the budget.
  std::uint64_t headroom_bits(Micros now) const {
    std::uint64_t q = queued_bits(now);
    return q >= queue_budget_bits_ ? 0 : queue_budget_bits_ - q;
  }

  struct Outcome {
    enum Kind { kDelivered, kLost, kTailDropped } kind;
    Micros deliver_at = 0;  // valid for kDelivered
  };

  Outcome offer(Micros now, std::uint64_t bits) {
    if (bits > headroom_bits(now) + 0) {
      ++tail_drops_;
      return {Outcome::kTailDropped, 0};
    }
    Micros start = free_at_ > now ? free_at_ : now;
    auto ser_us = static_cast<Micros>(static_cast<double>(bits) / model_.bandwidth_bps * 1e6 + 0.5);
    free_at_ = start + ser_us;
    bytes_on_wire_ += bits / 8;
    if (model_.loss_rate > 0 && rng_.chance(model_.loss_rate)) {
      ++loss_drops_;
      return {Outcome::kLost, 0};
    }
    auto prop_us = static_cast<Micros>(model_.propagation_delay_ms * 1e3 + 0.5);
    return {Outcome::kDelivered, free_at_ + prop_us};
  }

  std::uint64_t bytes_on_wire() const { return bytes_on_wire_; }
  std::uint64_t tail_drops() const { return tail_drops_; }
  std::uint64_t loss_drops() const { return loss_drops_; }

 private:
  static std::uint64_t default_budget(const LinkModel& m) {
    // One second worth of line rate.
    return static_cast<std::uint64_t>(m.bandwidth_bps);
  }

  std::uint64_t queued_bits(Micros now) const {
    if (free_at_ <= now) return 0;
    return static_cast<std::uint64_t>(static_cast<double>(free_at_ - now) / 1e6 *
                                      model_.bandwidth_bps);
  }

  LinkModel model_;
  Rng rng_;
  std::uint64_t queue_budget_bits_ = 10'000'000;
  Micros free_at_ = 0;
  std::uint64_t bytes_on_wire_ = 0;
  std::uint64_t tail_drops_ = 0;
  std::uint64_t loss_drops_ = 0;
};

// ---------------------------------------------------------------------------
// Simulated network

// In-process datagram fabric bound to a SimExecutor. Delivery is immediate
// (shaping happens at the overlay send point); unknown destinations drop.
class SimNet : public Network {
 public:
  explicit SimNet(SimExecutor& exec) : exec_(exec) {}

  std::unique_ptr<DatagramSocket> open(const std::string& host, std::uint16_t port) override {
    if (port == 0) port = next_port_++;
    Endpoint ep = host + ":" + std::to_string(port);
    if (sockets_.count(ep)) throw Error("sim endpoint in use: " + ep);
    auto sock = std::make_unique<Socket>(*this, ep);
    sockets_[ep] = sock.get();
    return sock;
  }

  SimExecutor& executor() { return exec_; }

 private:
  class Socket final : public DatagramSocket {
   public:
    Socket(SimNet& net, Endpoint ep) : net_(net), ep_(std::move(ep)) {}
    ~Socket() override { net_.sockets_.erase(ep_); }

    void send(const Endpoint& to, ByteView data) override {
      Bytes copy(data.begin(), data.end());
      Endpoint from = ep_;
      net_.exec_.post([this_net = &net_, to, from, copy = std::move(copy)]() mutable {
        auto it = this_net->sockets_.find(to);
        if (it == this_net->sockets_.end()) return;
        if (it->second->handler_) it->second->handler_(from, std::move(copy));
      });
    }

    void set_handler(DatagramHandler handler) override { handler_ = std::move(handler); }
    Endpoint local_endpoint() const override { return ep_; }

   private:
    friend class SimNet;
    SimNet& net_;
    Endpoint ep_;
    DatagramHandler handler_;
  };

  SimExecutor& exec_;
  std::map<Endpoint, Socket*> sockets_;
  std::uint16_t next_port_ = 40000;
};

// ---------------------------------------------------------------------------
// Real UDP (loopback)

class UdpNetwork : public Network {
 public:
  explicit UdpNetwork(RealExecutor& exec) : exec_(exec) {}

  std::unique_ptr<DatagramSocket> open(const std::string& host, std::uint16_t port) override {
    return std::make_unique<Socket>(exec_, host.empty() ? "127.0.0.1" : host, port);
  }

 private:
  class Socket final : public DatagramSocket {
   public:
    Socket(RealExecutor& exec, const std::string& host, std::uint16_t port) : exec_(exec) {
      fd_ = ::socket(AF_INET, SOCK_DGRAM | SOCK_NONBLOCK, 0);
      if (fd_ < 0) throw Error("socket() failed");
      sockaddr_in addr{};
      addr.sin_family = AF_INET;
      addr.sin_port = htons(port);
      if (inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1)
        throw Error("bad bind host: " + host);
      int one = 1;
      setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
      int buf = 4 << 20;
      setsockopt(fd_, SOL_SOCKET, SO_RCVBUF, &buf, sizeof buf);
      if (bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
        close(fd_);
        throw Error("bind failed for " + host + ":" + std::to_string(port));
      }
      sockaddr_in actual{};
      socklen_t len = sizeof actual;
      getsockname(fd_, reinterpret_cast<sockaddr*>(&actual), &len);
      char buf2[64];
      inet_ntop(AF_INET, &actual.sin_addr, buf2, sizeof buf2);
      local_ = std::string(buf2) + ":" + std::to_string(ntohs(actual.sin_port));
      exec_.register_fd(fd_, [this] { drain(); });
    }

    ~Socket() override {
      exec_.unregister_fd(fd_);
      close(fd_);
    }

    void send(const Endpoint& to, ByteView data) override {
      auto colon = to.rfind(':');
      if (colon == std::string::npos) throw Error("bad endpoint: " + to);
      sockaddr_in addr{};
      addr.sin_family = AF_INET;
      addr.sin_port = htons(static_cast<std::uint16_t>(std::stoi(to.substr(colon + 1))));
      if (inet_pton(AF_INET, to.substr(0, colon).c_str(), &addr.sin_addr) != 1)
        throw Error("bad endpoint host: " + to);
      sendto(fd_, data.data(), data.size(), 0, reinterpret_cast<sockaddr*>(&addr), sizeof addr);
    }

    void set_handler(DatagramHandler handler) override { handler_ = std::move(handler); }
    Endpoint local_endpoint() const override { return local_; }

   private:
    void drain() {
      std::uint8_t buf[65536];
      while (true) {
        sockaddr_in from{};
        socklen_t len = sizeof from;
        ssize_t n = recvfrom(fd_, buf, sizeof buf, 0, reinterpret_cast<sockaddr*>(&from), &len);
        if (n <= 0) break;
        char hostbuf[64];
        inet_ntop(AF_INET, &from.sin_addr, hostbuf, sizeof hostbuf);
        Endpoint src = std::string(hostbuf) + ":" + std::to_string(ntohs(from.sin_port));
        if (handler_) handler_(src, Bytes(buf, buf + n));
      }
    }

    RealExecutor& exec_;
    int fd_ = -1;
    Endpoint local_;
    DatagramHandler handler_;
  };

  RealExecutor& exec_;
};

}  // namespace fogmesh
