#pragma once

#include <atomic>
#include <bit>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include "fogmesh/bytes.hpp"
#include "fogmesh/codec.hpp"
#include "fogmesh/errors.hpp"
#include "fogmesh/launch.hpp"
#include "fogmesh/pubsub.hpp"
#include "fogmesh/video.hpp"

namespace fogmesh {

// Acknowledgement emitted by echo-ack nodes: enough to measure round trips
// and account for payload size without echoing the payload back.
struct AckBody {
  Micros capture_instant = 0;
  std::uint64_t frame_index = 0;
  std::uint32_t original_size = 0;
};

inline Bytes serialize_ack(const AckBody& a) {
  ByteWriter w;
  w.u64(a.capture_instant);
  w.u64(a.frame_index);
  w.u32(a.original_size);
  return w.take();
}

inline AckBody parse_ack(ByteView data) {
  ByteReader r(data);
  AckBody a;
  a.capture_instant = r.u64();
  a.frame_index = r.u64();
  a.original_size = r.u32();
  return a;
}

// Request/response pair understood by synthetic-compute nodes.
struct ComputeRequest {
  std::uint64_t request_id = 0;
  double work_units = 0;
  std::uint32_t response_size = 0;
  std::uint32_t padding = 0;  // extra request bytes, to model payload cost
};

inline Bytes serialize_compute_request(const ComputeRequest& q) {
  ByteWriter w;
  w.u64(q.request_id);
  w.u64(std::bit_cast<std::uint64_t>(q.work_units));
  w.u32(q.response_size);
  w.raw(Bytes(q.padding, 0));
  return w.take();
}

inline ComputeRequest parse_compute_request(ByteView data) {
  ByteReader r(data);
  ComputeRequest q;
  q.request_id = r.u64();
  q.work_units = std::bit_cast<double>(r.u64());
  q.response_size = r.u32();
  q.padding = static_cast<std::uint32_t>(r.remaining());
  return q;
}

namespace detail {

inline std::string param_str(const NodeSpec& spec, const std::string& key,
                             const std::string& fallback) {
  auto it = spec.params.find(key);
  return it == spec.params.end() ? fallback : it->second;
}

inline long param_int(const NodeSpec& spec, const std::string& key, long fallback) {
  auto it = spec.params.find(key);
  if (it == spec.params.end()) return fallback;
  try {
    return std::stol(it->second);
  } catch (const std::exception&) {
    throw ValidationError("behavior " + spec.name + ": param " + key +
                          " is not an integer: " + it->second);
  }
}

inline double param_double(const NodeSpec& spec, const std::string& key, double fallback) {
  auto it = spec.params.find(key);
  if (it == spec.params.end()) return fallback;
  try {
    return std::stod(it->second);
  } catch (const std::exception&) {
    throw ValidationError("behavior " + spec.name + ": param " + key +
                          " is not a number: " + it->second);
  }
}

}  // namespace detail

// A running node program. Constructed stopped; start() wires subscriptions
// and timers on the router's executor; stop() must leave no timer behind.
class Behavior {
 public:
  virtual ~Behavior() = default;
  virtual void start() = 0;
  virtual void stop() = 0;
  virtual Json status() { return Json::object(); }
};

class ImageSourceBehavior : public Behavior {
 public:
  ImageSourceBehavior(Router& router, NodeSpec spec) : router_(router), spec_(std::move(spec)) {
    if (spec_.publishes.empty())
      throw ValidationError("image-source " + spec_.name + " publishes nothing");
    SyntheticVideo::Config vc;
    vc.width = static_cast<int>(detail::param_int(spec_, "width", 640));
    vc.height = static_cast<int>(detail::param_int(spec_, "height", 480));
    vc.channels = static_cast<int>(detail::param_int(spec_, "channels", 3));
    vc.seed = static_cast<std::uint64_t>(detail::param_int(spec_, "seed", 1));
    video_ = std::make_unique<SyntheticVideo>(vc);
    fps_ = detail::param_double(spec_, "fps", 30.0);
    if (fps_ <= 0) throw ValidationError("image-source " + spec_.name + ": fps must be > 0");
    limit_ = detail::param_int(spec_, "frames", 0);
    topic_ = spec_.effective(spec_.publishes[0]);
  }

  void start() override {
    node_ = router_.create_node(spec_.name);
    node_->advertise(topic_);
    period_ = static_cast<Micros>(1e6 / fps_);
    auto& ex = router_.executor();
    timer_ = ex.schedule_after(period_, [this] { tick(); });
  }

  void stop() override {
    stopped_ = true;
    router_.executor().cancel(timer_);
  }

  Json status() override {
    return {{"behavior", "image-source"}, {"frames_published", produced_.load()}};
  }

  std::uint64_t produced() const { return produced_.load(); }

 private:
  void tick() {
    if (stopped_) return;
    auto& ex = router_.executor();
    if (limit_ == 0 || produced_ < static_cast<std::uint64_t>(limit_)) {
      Frame f = video_->frame(next_index_++);
      f.capture_instant = ex.now();
      node_->publish(topic_, serialize_frame(f));
      ++produced_;
    }
    if (limit_ != 0 && produced_ >= static_cast<std::uint64_t>(limit_)) return;
    timer_ = ex.schedule_after(period_, [this] { tick(); });
  }

  Router& router_;
  NodeSpec spec_;
  std::unique_ptr<SyntheticVideo> video_;
  double fps_ = 30.0;
  long limit_ = 0;
  std::string topic_;
  Node* node_ = nullptr;
  Micros period_ = 0;
  std::uint64_t timer_ = 0;
  std::uint64_t next_index_ = 0;
  std::atomic<std::uint64_t> produced_{0};
  bool stopped_ = false;
};

class EchoAckBehavior : public Behavior {
 public:
  EchoAckBehavior(Router& router, NodeSpec spec) : router_(router), spec_(std::move(spec)) {
    if (spec_.publishes.empty() || spec_.subscribes.empty())
      throw ValidationError("echo-ack " + spec_.name + " needs a subscription and a publish topic");
    ack_topic_ = spec_.effective(spec_.publishes[0]);
  }

  void start() override {
    node_ = router_.create_node(spec_.name);
    node_->advertise(ack_topic_);
    for (const auto& t : spec_.subscribes) {
      node_->subscribe(spec_.effective(t), DeliveryMode::kBestEffort,
                       [this](const Message& m) { on_message(m); });
    }
  }

  void stop() override { stopped_ = true; }

  Json status() override { return {{"behavior", "echo-ack"}, {"acked", acked_.load()}}; }

 private:
  void on_message(const Message& m) {
    if (stopped_) return;
    AckBody a;
    a.original_size = static_cast<std::uint32_t>(m.payload.size());
    try {
      Frame f = parse_frame(ByteView(m.payload.data(), m.payload.size()));
      a.capture_instant = f.capture_instant;
      a.frame_index = f.frame_index;
    } catch (const ParseError&) {
      a.capture_instant = m.publish_instant;
      a.frame_index = m.seq;
    }
    node_->publish(ack_topic_, serialize_ack(a));
    ++acked_;
  }

  Router& router_;
  NodeSpec spec_;
  std::string ack_topic_;
  Node* node_ = nullptr;
  std::atomic<std::uint64_t> acked_{0};
  bool stopped_ = false;
};

// Models an offloadable computation: every request costs work_units/speed
// seconds of (virtual or real) time before the response is emitted.
class SyntheticComputeBehavior : public Behavior {
 public:
  SyntheticComputeBehavior(Router& router, NodeSpec spec)
      : router_(router), spec_(std::move(spec)) {
    if (spec_.publishes.empty() || spec_.subscribes.empty())
      throw ValidationError("synthetic-compute " + spec_.name +
                            " needs a subscription and a publish topic");
    speed_ = detail::param_double(spec_, "speed", 1.0);
    if (speed_ <= 0)
      throw ValidationError("synthetic-compute " + spec_.name + ": speed must be > 0");
    out_topic_ = spec_.effective(spec_.publishes[0]);
  }

  void start() override {
    node_ = router_.create_node(spec_.name);
    node_->advertise(out_topic_);
    for (const auto& t : spec_.subscribes)
      node_->subscribe(spec_.effective(t), DeliveryMode::kBestEffort,
                       [this](const Message& m) { on_request(m); });
  }

  void stop() override {
    stopped_ = true;
    auto& ex = router_.executor();
    for (auto id : timers_) ex.cancel(id);
    timers_.clear();
  }

  Json status() override {
    return {{"behavior", "synthetic-compute"}, {"completed", completed_.load()}};
  }

 private:
  void on_request(const Message& m) {
    if (stopped_) return;
    ComputeRequest q;
    try {
      q = parse_compute_request(ByteView(m.payload.data(), m.payload.size()));
    } catch (const Error&) {
      return;
    }
    auto delay = static_cast<Micros>(q.work_units / speed_ * 1e6);
    auto& ex = router_.executor();
    auto id = ex.schedule_after(delay, [this, q] {
      if (stopped_) return;
      ByteWriter w;
      w.u64(q.request_id);
      Bytes out = w.take();
      if (q.response_size > out.size()) out.resize(q.response_size, 0);
      node_->publish(out_topic_, std::move(out));
      ++completed_;
    });
    timers_.push_back(id);
  }

  Router& router_;
  NodeSpec spec_;
  double speed_ = 1.0;
  std::string out_topic_;
  Node* node_ = nullptr;
  std::vector<std::uint64_t> timers_;
  std::atomic<std::uint64_t> completed_{0};
  bool stopped_ = false;
};

class SinkBehavior : public Behavior {
 public:
  SinkBehavior(Router& router, NodeSpec spec) : router_(router), spec_(std::move(spec)) {
    if (spec_.subscribes.empty())
      throw ValidationError("sink " + spec_.name + " subscribes to nothing");
  }

  void start() override {
    node_ = router_.create_node(spec_.name);
    for (const auto& t : spec_.subscribes)
      node_->subscribe(spec_.effective(t), DeliveryMode::kBestEffort,
                       [this](const Message& m) {
                         received_ += 1;
                         received_bytes_ += m.payload.size();
                       });
  }

  void stop() override {}

  Json status() override {
    return {{"behavior", "sink"},
            {"received", received_.load()},
            {"received_bytes", received_bytes_.load()}};
  }

 private:
  Router& router_;
  NodeSpec spec_;
  Node* node_ = nullptr;
  std::atomic<std::uint64_t> received_{0};
  std::atomic<std::uint64_t> received_bytes_{0};
};

// Runs an external program inside the node's working directory. The process
// is a plain child: started on start(), SIGTERMed on stop().
class CustomExecutableBehavior : public Behavior {
 public:
  CustomExecutableBehavior(Router& router, NodeSpec spec, std::filesystem::path workdir)
      : spec_(std::move(spec)), workdir_(std::move(workdir)) {
    (void)router;
    path_ = detail::param_str(spec_, "path", "");
    if (path_.empty())
      throw ValidationError("custom-executable " + spec_.name + " missing path param");
    args_ = detail::param_str(spec_, "args", "");
  }

  void start() override {
    pid_t pid = ::fork();
    if (pid < 0) throw Error("custom-executable " + spec_.name + ": fork failed");
    if (pid == 0) {
      if (!workdir_.empty()) {
        std::error_code ec;
        std::filesystem::create_directories(workdir_, ec);
        if (::chdir(workdir_.c_str()) != 0) ::_exit(127);
      }
      std::vector<std::string> argv_s{path_};
      if (!args_.empty()) {
        std::size_t pos = 0;
        while (pos < args_.size()) {
          auto sp = args_.find(' ', pos);
          if (sp == std::string::npos) sp = args_.size();
          if (sp > pos) argv_s.push_back(args_.substr(pos, sp - pos));
          pos = sp + 1;
        }
      }
      std::vector<char*> argv;
      for (auto& s : argv_s) argv.push_back(s.data());
      argv.push_back(nullptr);
      ::execvp(path_.c_str(), argv.data());
      ::_exit(127);
    }
    pid_ = pid;
  }

  void stop() override {
    if (pid_ <= 0) return;
    ::kill(pid_, SIGTERM);
    int status = 0;
    for (int i = 0; i < 200; ++i) {
      if (::waitpid(pid_, &status, WNOHANG) == pid_) {
        pid_ = -1;
        return;
      }
      ::usleep(10'000);
    }
    ::kill(pid_, SIGKILL);
    ::waitpid(pid_, &status, 0);
    pid_ = -1;
  }

  Json status() override {
    bool alive = pid_ > 0 && ::kill(pid_, 0) == 0;
    return {{"behavior", "custom-executable"}, {"pid", pid_}, {"alive", alive}};
  }

 private:
  NodeSpec spec_;
  std::filesystem::path workdir_;
  std::string path_;
  std::string args_;
  pid_t pid_ = -1;
};

inline std::string compression_control_topic(const std::string& topic) {
  return topic + "/ctl";
}

// Robot-side half of a compression pipeline: T/src in, T/enc out.
// Streaming chunks ride behind an 8-byte capture timestamp so latency
// measurement survives the codec (chunks carry pixel data only).
class EncoderBehavior : public Behavior {
 public:
  EncoderBehavior(Router& router, NodeSpec spec) : router_(router), spec_(std::move(spec)) {
    topic_ = detail::param_str(spec_, "topic", "");
    if (topic_.empty())
      throw ValidationError("encoder " + spec_.name + " missing topic param");
    mode_ = codec_mode_from_name(detail::param_str(spec_, "mode", "streaming"));
    auto interval = detail::param_int(spec_, "keyframe_interval", kDefaultKeyframeInterval);
    encoder_ = std::make_unique<StreamEncoder>(static_cast<int>(interval));
    in_topic_ = spec_.subscribes.empty() ? topic_ + "/src" : spec_.effective(spec_.subscribes[0]);
    out_topic_ = spec_.publishes.empty() ? topic_ + "/enc" : spec_.effective(spec_.publishes[0]);
  }

  void start() override {
    node_ = router_.create_node(spec_.name);
    node_->advertise(out_topic_);
    node_->subscribe(in_topic_, DeliveryMode::kBestEffort,
                     [this](const Message& m) { on_frame(m); });
    node_->subscribe(compression_control_topic(topic_), DeliveryMode::kBestEffort,
                     [this](const Message&) { encoder_->request_keyframe(); });
  }

  void stop() override { stopped_ = true; }

  Json status() override {
    return {{"behavior", "encoder"}, {"mode", codec_mode_name(mode_)},
            {"encoded", encoded_.load()}};
  }

 private:
  void on_frame(const Message& m) {
    if (stopped_) return;
    switch (mode_) {
      case CodecMode::kRaw:
        node_->publish(out_topic_, m.payload);
        break;
      case CodecMode::kPerFrame: {
        Frame f;
        try {
          f = parse_frame(ByteView(m.payload.data(), m.payload.size()));
        } catch (const ParseError&) {
          return;
        }
        node_->publish(out_topic_, per_frame_encode(f));
        break;
      }
      case CodecMode::kStreaming: {
        Frame f;
        try {
          f = parse_frame(ByteView(m.payload.data(), m.payload.size()));
        } catch (const ParseError&) {
          return;
        }
        CodecChunk chunk = encoder_->encode(f);
        ByteWriter w;
        w.u64(static_cast<std::uint64_t>(f.capture_instant));
        w.raw(serialize_chunk(chunk));
        node_->publish(out_topic_, w.take());
        break;
      }
    }
    ++encoded_;
  }

  Router& router_;
  NodeSpec spec_;
  std::string topic_, in_topic_, out_topic_;
  CodecMode mode_ = CodecMode::kStreaming;
  std::unique_ptr<StreamEncoder> encoder_;
  Node* node_ = nullptr;
  std::atomic<std::uint64_t> encoded_{0};
  bool stopped_ = false;
};

// Cloud-side half: T/enc in, T out. Publishes locally only; the original
// topic still exists robot-side, and re-routing the reconstruction would
// deliver every frame twice to machines running their own decoder.
class DecoderBehavior : public Behavior {
 public:
  DecoderBehavior(Router& router, NodeSpec spec) : router_(router), spec_(std::move(spec)) {
    topic_ = detail::param_str(spec_, "topic", "");
    if (topic_.empty())
      throw ValidationError("decoder " + spec_.name + " missing topic param");
    mode_ = codec_mode_from_name(detail::param_str(spec_, "mode", "streaming"));
    in_topic_ = spec_.subscribes.empty() ? topic_ + "/enc" : spec_.effective(spec_.subscribes[0]);
    out_topic_ = spec_.publishes.empty() ? topic_ : spec_.effective(spec_.publishes[0]);
  }

  void start() override {
    node_ = router_.create_node(spec_.name);
    node_->advertise(compression_control_topic(topic_));
    node_->subscribe(in_topic_, DeliveryMode::kBestEffort,
                     [this](const Message& m) { on_chunk(m); });
  }

  void stop() override { stopped_ = true; }

  Json status() override {
    return {{"behavior", "decoder"}, {"mode", codec_mode_name(mode_)},
            {"decoded", decoded_.load()}, {"resyncs", resyncs_.load()}};
  }

 private:
  void on_chunk(const Message& m) {
    if (stopped_) return;
    switch (mode_) {
      case CodecMode::kRaw:
        node_->publish_local(out_topic_, m.payload);
        ++decoded_;
        break;
      case CodecMode::kPerFrame: {
        try {
          Frame f = per_frame_decode(ByteView(m.payload.data(), m.payload.size()));
          node_->publish_local(out_topic_, serialize_frame(f));
          ++decoded_;
        } catch (const Error&) {
        }
        break;
      }
      case CodecMode::kStreaming: {
        try {
          ByteReader r(ByteView(m.payload.data(), m.payload.size()));
          auto capture = static_cast<Micros>(r.u64());
          CodecChunk chunk = parse_chunk(r.raw(r.remaining()));
          Frame f = decoder_.decode(chunk);
          f.capture_instant = capture;
          node_->publish_local(out_topic_, serialize_frame(f));
          ++decoded_;
        } catch (const ResyncNeeded&) {
          ++resyncs_;
          decoder_.reset();
          node_->publish(compression_control_topic(topic_), Bytes{1});
        } catch (const Error&) {
        }
        break;
      }
    }
  }

  Router& router_;
  NodeSpec spec_;
  std::string topic_, in_topic_, out_topic_;
  CodecMode mode_ = CodecMode::kStreaming;
  StreamDecoder decoder_;
  Node* node_ = nullptr;
  std::atomic<std::uint64_t> decoded_{0};
  std::atomic<std::uint64_t> resyncs_{0};
  bool stopped_ = false;
};

inline std::unique_ptr<Behavior> make_behavior(Router& router, const NodeSpec& spec,
                                               const std::filesystem::path& workdir = {}) {
  if (spec.behavior == "image-source")
    return std::make_unique<ImageSourceBehavior>(router, spec);
  if (spec.behavior == "echo-ack") return std::make_unique<EchoAckBehavior>(router, spec);
  if (spec.behavior == "synthetic-compute")
    return std::make_unique<SyntheticComputeBehavior>(router, spec);
  if (spec.behavior == "sink") return std::make_unique<SinkBehavior>(router, spec);
  if (spec.behavior == "custom-executable")
    return std::make_unique<CustomExecutableBehavior>(router, spec, workdir);
  if (spec.behavior == "encoder") return std::make_unique<EncoderBehavior>(router, spec);
  if (spec.behavior == "decoder") return std::make_unique<DecoderBehavior>(router, spec);
  throw ValidationError("unknown behavior: " + spec.behavior);
}

}  // namespace fogmesh
