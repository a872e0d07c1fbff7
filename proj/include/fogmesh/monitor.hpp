#pragma once

#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include "fogmesh/bytes.hpp"
#include "fogmesh/codec.hpp"
#include "fogmesh/errors.hpp"
#include "fogmesh/pubsub.hpp"

namespace fogmesh {

inline constexpr const char* kBridgeSubprotocol = "fogmesh-bridge-v1";
inline constexpr const char* kBridgePath = "/topics";

enum class BridgeEncoding : std::uint8_t {
  kOpaque = 0,
  kFrameImage = 1,
  kText = 2,
};

struct BridgeFrame {
  std::string topic;
  std::uint64_t seq = 0;
  Micros publish_instant = 0;
  BridgeEncoding encoding = BridgeEncoding::kOpaque;
  Bytes payload;
};

inline Bytes serialize_bridge_frame(const BridgeFrame& f) {
  ByteWriter w;
  w.u16(static_cast<std::uint16_t>(f.topic.size()));
  w.str(f.topic);
  w.u64(f.seq);
  w.u64(static_cast<std::uint64_t>(f.publish_instant));
  w.u8(static_cast<std::uint8_t>(f.encoding));
  w.u32(static_cast<std::uint32_t>(f.payload.size()));
  w.raw(f.payload);
  return w.take();
}

inline BridgeFrame parse_bridge_frame(ByteView data) {
  ByteReader r(data);
  BridgeFrame f;
  auto tlen = r.u16();
  f.topic = r.str(tlen);
  f.seq = r.u64();
  f.publish_instant = static_cast<Micros>(r.u64());
  auto enc = r.u8();
  if (enc > 2) throw ParseError("bridge frame: bad encoding tag");
  f.encoding = static_cast<BridgeEncoding>(enc);
  auto plen = r.u32();
  f.payload = r.raw(plen);
  if (!r.done()) throw ParseError("bridge frame: trailing bytes");
  return f;
}

inline BridgeEncoding classify_bridge_payload(const Bytes& payload) {
  try {
    parse_frame(ByteView(payload.data(), payload.size()));
    return BridgeEncoding::kFrameImage;
  } catch (const Error&) {
  }
  if (payload.empty()) return BridgeEncoding::kOpaque;
  for (auto b : payload)
    if ((b < 0x20 && b != '\n' && b != '\r' && b != '\t') || b == 0x7f)
      return BridgeEncoding::kOpaque;
  return BridgeEncoding::kText;
}

// Exact match, or prefix match for patterns with a trailing '*'.
inline bool topic_matches(const std::string& pattern, const std::string& topic) {
  if (!pattern.empty() && pattern.back() == '*')
    return topic.compare(0, pattern.size() - 1, pattern, 0, pattern.size() - 1) == 0;
  return pattern == topic;
}

struct BridgeConfig {
  std::vector<std::string> topics;
  std::uint16_t port = 8765;
  int max_clients = 8;
  double rate_cap_hz = 20.0;  // per topic, per client; newest frame wins
};

// Observer-side websocket fan-out for pub/sub topics. Subscribes best-effort
// only, so enabling it never changes what the fabric delivers elsewhere.
// Clients each get an independent bounded stream: frames beyond the per-topic
// rate cap are replaced by newer ones rather than queued.
class Monitor {
  using tcp = boost::asio::ip::tcp;
  using ws_stream = boost::beast::websocket::stream<tcp::socket>;

 public:
  Monitor(Router& router, BridgeConfig cfg) : router_(router), cfg_(std::move(cfg)) {
    if (cfg_.rate_cap_hz <= 0) throw ValidationError("monitor: rate cap must be > 0");
    interval_ = static_cast<Micros>(1e6 / cfg_.rate_cap_hz);
  }

  ~Monitor() { stop(); }

  void start() {
    boost::system::error_code ec;
    tcp::endpoint ep(boost::asio::ip::address_v4::loopback(), cfg_.port);
    acceptor_.open(ep.protocol(), ec);
    if (!ec) acceptor_.set_option(tcp::acceptor::reuse_address(false), ec);
    if (!ec) acceptor_.bind(ep, ec);
    if (!ec) acceptor_.listen(boost::asio::socket_base::max_listen_connections, ec);
    if (ec) throw Error("monitor: cannot listen on port " + std::to_string(cfg_.port) + ": " +
                        ec.message());
    port_ = acceptor_.local_endpoint().port();
    accept_next();
    node_ = router_.create_node("monitor-bridge");
    for (const auto& pattern : cfg_.topics) {
      if (pattern.empty()) continue;
      if (pattern.back() == '*')
        wildcards_.push_back(pattern);
      else
        subscribe_topic(pattern);
    }
    discover_timer_ = router_.executor().schedule_after(250'000, [this] { discover_tick(); });
    io_thread_ = std::thread([this] {
      keepalive_loop();
      flush_loop();
      io_.run();
    });
    running_ = true;
  }

  void stop() {
    if (!running_) return;
    running_ = false;
    router_.executor().cancel(discover_timer_);
    io_.stop();
    if (io_thread_.joinable()) io_thread_.join();
    boost::system::error_code ec;
    acceptor_.close(ec);
    std::lock_guard lk(mu_);
    for (auto& s : sessions_) s->close();
    sessions_.clear();
  }

  std::uint16_t port() const { return port_; }
  std::string url() const {
    return "ws://127.0.0.1:" + std::to_string(port_) + kBridgePath;
  }

  std::size_t client_count() {
    std::lock_guard lk(mu_);
    return sessions_.size();
  }

  std::vector<std::string> subscribed_topics() {
    std::lock_guard lk(mu_);
    return {subscribed_.begin(), subscribed_.end()};
  }

 private:
  // One websocket client. All stream operations happen on the io thread;
  // the pubsub thread only touches the queue under the session mutex.
  struct Session : std::enable_shared_from_this<Session> {
    explicit Session(Monitor& owner, tcp::socket socket)
        : monitor(owner), stream(std::move(socket)) {}

    Monitor& monitor;
    ws_stream stream;
    boost::beast::flat_buffer read_buf;
    boost::beast::http::request<boost::beast::http::string_body> req;

    std::mutex mu;
    std::deque<Bytes> queue;
    std::map<std::string, Micros> last_sent;
    std::map<std::string, BridgeFrame> pending;  // newest capped frame per topic
    bool writing = false;
    bool open = false;

    void close() {
      boost::system::error_code ec;
      stream.next_layer().close(ec);
      open = false;
    }

    // Called with mu held; initiates a write if none is in flight.
    void kick_locked() {
      if (writing || queue.empty() || !open) return;
      writing = true;
      auto self = shared_from_this();
      boost::asio::post(stream.get_executor(), [self] { self->write_next(); });
    }

    void write_next() {
      Bytes frame;
      {
        std::lock_guard lk(mu);
        if (queue.empty() || !open) {
          writing = false;
          return;
        }
        frame = std::move(queue.front());
        queue.pop_front();
      }
      auto self = shared_from_this();
      auto buf = std::make_shared<Bytes>(std::move(frame));
      stream.binary(true);
      stream.async_write(boost::asio::buffer(*buf),
                         [self, buf](boost::system::error_code ec, std::size_t) {
                           if (ec) {
                             self->monitor.drop_session(self);
                             return;
                           }
                           self->write_next();
                         });
    }

    void read_next() {
      auto self = shared_from_this();
      stream.async_read(read_buf, [self](boost::system::error_code ec, std::size_t) {
        if (ec) {
          self->monitor.drop_session(self);
          return;
        }
        self->read_buf.consume(self->read_buf.size());  // inbound data ignored
        self->read_next();
      });
    }

    // Rate-capped enqueue; newest frame replaces a pending one.
    void offer(const BridgeFrame& f, Micros now, Micros interval) {
      std::lock_guard lk(mu);
      if (!open) return;
      auto it = last_sent.find(f.topic);
      if (it == last_sent.end() || now - it->second >= interval) {
        last_sent[f.topic] = now;
        enqueue_locked(f);
      } else {
        pending[f.topic] = f;
      }
    }

    void flush(Micros now, Micros interval) {
      std::lock_guard lk(mu);
      if (!open) return;
      for (auto it = pending.begin(); it != pending.end();) {
        if (now - last_sent[it->first] >= interval) {
          last_sent[it->first] = now;
          enqueue_locked(it->second);
          it = pending.erase(it);
        } else {
          ++it;
        }
      }
    }

    void enqueue_locked(const BridgeFrame& f) {
      if (queue.size() >= 256) queue.pop_front();  // slow client: shed oldest
      queue.push_back(serialize_bridge_frame(f));
      kick_locked();
    }
  };

  void accept_next() {
    acceptor_.async_accept([this](boost::system::error_code ec, tcp::socket socket) {
      if (ec) return;  // acceptor closed
      handle_connection(std::move(socket));
      accept_next();
    });
  }

  void handle_connection(tcp::socket socket) {
    auto session = std::make_shared<Session>(*this, std::move(socket));
    auto self = session;
    boost::beast::http::async_read(
        self->stream.next_layer(), self->read_buf, self->req,
        [this, self](boost::system::error_code ec, std::size_t) {
          if (ec || !boost::beast::websocket::is_upgrade(self->req) ||
              self->req.target() != kBridgePath) {
            self->close();
            return;
          }
          bool over_capacity;
          {
            std::lock_guard lk(mu_);
            over_capacity = sessions_.size() >= static_cast<std::size_t>(cfg_.max_clients);
          }
          self->stream.set_option(
              boost::beast::websocket::stream_base::decorator([](boost::beast::websocket::response_type& res) {
                res.set(boost::beast::http::field::sec_websocket_protocol, kBridgeSubprotocol);
              }));
          self->stream.async_accept(self->req, [this, self, over_capacity](
                                                   boost::system::error_code ec2) {
            if (ec2) {
              self->close();
              return;
            }
            if (over_capacity) {
              self->stream.async_close(
                  boost::beast::websocket::close_reason(boost::beast::websocket::close_code::try_again_later),
                  [self](boost::system::error_code) { self->close(); });
              return;
            }
            self->open = true;
            {
              std::lock_guard lk(mu_);
              sessions_.push_back(self);
            }
            self->read_next();
          });
        });
  }

  void drop_session(const std::shared_ptr<Session>& s) {
    s->close();
    std::lock_guard lk(mu_);
    std::erase(sessions_, s);
  }

  void subscribe_topic(const std::string& topic) {
    {
      std::lock_guard lk(mu_);
      if (!subscribed_.insert(topic).second) return;
    }
    node_->subscribe(topic, DeliveryMode::kBestEffort,
                     [this](const Message& m) { on_message(m); });
  }

  // Runs on the router executor: match newly observed topics to wildcards.
  void discover_tick() {
    if (!running_) return;
    if (!wildcards_.empty()) {
      for (const auto& topic : router_.observed_topics()) {
        bool match = false;
        for (const auto& p : wildcards_)
          if (topic_matches(p, topic)) {
            match = true;
            break;
          }
        if (match) subscribe_topic(topic);
      }
    }
    discover_timer_ = router_.executor().schedule_after(250'000, [this] { discover_tick(); });
  }

  void on_message(const Message& m) {
    BridgeFrame f;
    f.topic = m.topic;
    f.seq = m.seq;
    f.publish_instant = m.publish_instant;
    f.payload = m.payload;
    f.encoding = classify_bridge_payload(f.payload);
    Micros now = monotonic_now();
    std::vector<std::shared_ptr<Session>> targets;
    {
      std::lock_guard lk(mu_);
      targets.assign(sessions_.begin(), sessions_.end());
    }
    for (auto& s : targets) s->offer(f, now, interval_);
  }

  void keepalive_loop() {
    keepalive_timer_ = std::make_unique<boost::asio::steady_timer>(io_);
    schedule_keepalive();
  }

  void schedule_keepalive() {
    keepalive_timer_->expires_after(std::chrono::seconds(1));
    keepalive_timer_->async_wait([this](boost::system::error_code ec) {
      if (ec) return;
      std::vector<std::shared_ptr<Session>> targets;
      {
        std::lock_guard lk(mu_);
        targets.assign(sessions_.begin(), sessions_.end());
      }
      for (auto& s : targets)
        s->stream.async_ping(boost::beast::websocket::ping_data{}, [](boost::system::error_code) {});
      schedule_keepalive();
    });
  }

  void flush_loop() {
    flush_timer_ = std::make_unique<boost::asio::steady_timer>(io_);
    schedule_flush();
  }

  void schedule_flush() {
    flush_timer_->expires_after(std::chrono::microseconds(std::max<Micros>(interval_ / 2, 1000)));
    flush_timer_->async_wait([this](boost::system::error_code ec) {
      if (ec) return;
      Micros now = monotonic_now();
      std::vector<std::shared_ptr<Session>> targets;
      {
        std::lock_guard lk(mu_);
        targets.assign(sessions_.begin(), sessions_.end());
      }
      for (auto& s : targets) s->flush(now, interval_);
      schedule_flush();
    });
  }

  Router& router_;
  BridgeConfig cfg_;
  Micros interval_ = 50'000;
  boost::asio::io_context io_;
  tcp::acceptor acceptor_{io_};
  std::thread io_thread_;
  std::unique_ptr<boost::asio::steady_timer> keepalive_timer_;
  std::unique_ptr<boost::asio::steady_timer> flush_timer_;
  Node* node_ = nullptr;
  std::uint16_t port_ = 0;
  std::uint64_t discover_timer_ = 0;
  std::vector<std::string> wildcards_;
  std::mutex mu_;
  std::set<std::string> subscribed_;
  std::vector<std::shared_ptr<Session>> sessions_;
  bool running_ = false;
};

}  // namespace fogmesh
