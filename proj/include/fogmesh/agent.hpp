#pragma once

#include <chrono>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <fcntl.h>
#include <signal.h>
#include <sys/stat.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include "fogmesh/behaviors.hpp"
#include "fogmesh/launch.hpp"
#include "fogmesh/net.hpp"
#include "fogmesh/overlay.hpp"
#include "fogmesh/provision.hpp"
#include "fogmesh/pubsub.hpp"
#include "fogmesh/statedir.hpp"

namespace fogmesh {

inline std::string control_topic(const std::string& machine) { return "/fog/ctl/" + machine; }
inline std::string control_reply_topic(const std::string& machine) {
  return "/fog/ctl/" + machine + "/re";
}
inline std::string health_topic(const std::string& machine) { return "/fog/health/" + machine; }

inline std::string to_base64(ByteView data) {
  std::string out(sodium_base64_encoded_len(data.size(), sodium_base64_VARIANT_ORIGINAL), '\0');
  sodium_bin2base64(out.data(), out.size(), data.data(), data.size(),
                    sodium_base64_VARIANT_ORIGINAL);
  out.resize(std::strlen(out.c_str()));
  return out;
}

inline Bytes from_base64(const std::string& text) {
  Bytes out(text.size());
  std::size_t len = 0;
  if (sodium_base642bin(out.data(), out.size(), text.data(), text.size(), nullptr, &len,
                        nullptr, sodium_base64_VARIANT_ORIGINAL) != 0)
    throw ParseError("invalid base64");
  out.resize(len);
  return out;
}

// Boot document for one machine agent, written by the orchestrator into the
// machine working directory. Holds the machine's own private key; file mode
// is the confidentiality boundary (0600, owner-only directory).
struct AgentConfig {
  std::string machine_name;
  std::uint16_t host_id = 0;
  Key32 private_key;
  Key32 operator_public;
  std::string listen_host = "127.0.0.1";
  std::uint16_t listen_port = 0;
  Micros heartbeat_interval = 1'000'000;
};

inline Json agent_config_to_json(const AgentConfig& c) {
  Json j;
  j["machine_name"] = c.machine_name;
  j["host_id"] = c.host_id;
  j["private_key"] = c.private_key.hex();
  j["operator_public"] = c.operator_public.hex();
  j["listen_host"] = c.listen_host;
  j["listen_port"] = c.listen_port;
  j["heartbeat_interval"] = c.heartbeat_interval;
  return j;
}

inline AgentConfig agent_config_from_json(const Json& j) {
  AgentConfig c;
  c.machine_name = j.at("machine_name").get<std::string>();
  c.host_id = j.at("host_id").get<std::uint16_t>();
  c.private_key = Key32::from_hex_str(j.at("private_key").get<std::string>());
  c.operator_public = Key32::from_hex_str(j.at("operator_public").get<std::string>());
  c.listen_host = j.value("listen_host", "127.0.0.1");
  c.listen_port = j.value("listen_port", std::uint16_t{0});
  c.heartbeat_interval = j.value("heartbeat_interval", Micros{1'000'000});
  return c;
}

// One machine's resident process: joins the overlay, answers control
// requests on its acked command topic, runs node behaviors, and emits
// heartbeats. Runs against any executor/network pair, so the whole control
// plane is also exercisable on a virtual clock.
class AgentCore {
 public:
  AgentCore(Executor& ex, Network& net, AgentConfig cfg, std::filesystem::path workdir)
      : ex_(ex), cfg_(std::move(cfg)), workdir_(std::move(workdir)) {
    socket_ = net.open(cfg_.listen_host, cfg_.listen_port);
    Mesh::Config mc;
    mc.identity.secret_key = cfg_.private_key;
    mc.identity.public_key = x25519_public(cfg_.private_key);
    mesh_ = std::make_unique<Mesh>(ex_, *socket_, mc);
    mesh_->allow_peer(cfg_.operator_public);
    Router::Config rc;
    rc.machine_name = cfg_.machine_name;
    rc.host_id = cfg_.host_id;
    router_ = std::make_unique<Router>(ex_, *mesh_, rc);
  }

  ~AgentCore() { shutdown(); }

  void start() {
    node_ = router_->create_node("agent");
    node_->advertise(control_reply_topic(cfg_.machine_name));
    node_->advertise(health_topic(cfg_.machine_name));
    node_->subscribe(control_topic(cfg_.machine_name), DeliveryMode::kAcked,
                     [this](const Message& m) { on_request(m); });
    heartbeat_timer_ = ex_.schedule_after(cfg_.heartbeat_interval, [this] { heartbeat(); });
    started_at_ = ex_.now();
  }

  // Overlay endpoint peers can dial.
  Endpoint endpoint() const { return socket_->local_endpoint(); }
  const Key32& public_key() const { return mesh_->public_key(); }
  Router& router() { return *router_; }
  Mesh& mesh() { return *mesh_; }
  bool shutdown_requested() const { return shutdown_requested_; }

  // Runs on the executor so teardown cannot interleave with a callback that
  // is already inside the router or a behavior.
  void shutdown() {
    run_on_executor(ex_, [this] {
      if (stopped_) return;
      stopped_ = true;
      ex_.cancel(heartbeat_timer_);
      for (auto it = behaviors_.rbegin(); it != behaviors_.rend(); ++it) (*it)->stop();
      behaviors_.clear();
      router_->stop();
      mesh_->stop();
    });
  }

 private:
  void on_request(const Message& m) {
    Json req;
    try {
      req = Json::parse(m.payload.begin(), m.payload.end());
    } catch (const Json::parse_error&) {
      return;
    }
    std::uint64_t rid = req.value("rid", std::uint64_t{0});
    if (auto it = replied_.find(rid); it != replied_.end()) {
      node_->publish(control_reply_topic(cfg_.machine_name), it->second);
      return;  // duplicate of an already-served request
    }
    Json reply;
    reply["rid"] = rid;
    try {
      reply["ok"] = true;
      reply["result"] = dispatch(req.value("op", ""), req.value("args", Json::object()));
    } catch (const std::exception& e) {
      reply["ok"] = false;
      reply["error"] = e.what();
    }
    std::string dumped = reply.dump();
    Bytes payload(dumped.begin(), dumped.end());
    replied_[rid] = payload;
    replied_order_.push_back(rid);
    while (replied_order_.size() > 256) {
      replied_.erase(replied_order_.front());
      replied_order_.pop_front();
    }
    node_->publish(control_reply_topic(cfg_.machine_name), std::move(payload));
    if (req.value("op", "") == "shutdown") shutdown_requested_ = true;
  }

  Json dispatch(const std::string& op, const Json& args) {
    if (op == "ping") return {{"pong", true}, {"machine", cfg_.machine_name}};
    if (op == "peer-config") return op_peer_config(args);
    if (op == "put-file") return op_put_file(args);
    if (op == "launch-nodes") return op_launch_nodes(args);
    if (op == "stop-nodes") return op_stop_nodes();
    if (op == "status") return op_status();
    if (op == "exec") return op_exec(args);
    if (op == "shutdown") return Json{{"stopping", true}};
    throw ValidationError("agent: unknown op " + op);
  }

  Json op_peer_config(const Json& args) {
    int connected = 0;
    for (const Json& jp : args.value("peers", Json::array())) {
      Key32 pub = Key32::from_hex_str(jp.at("public_key").get<std::string>());
      auto host_id = jp.at("host_id").get<std::uint16_t>();
      mesh_->allow_peer(pub);
      router_->add_peer(pub, host_id);
      if (jp.value("initiate", false)) {
        mesh_->connect(pub, jp.at("endpoint").get<std::string>(), [](bool) {});
        ++connected;
      }
    }
    return {{"peers", args.value("peers", Json::array()).size()}, {"initiated", connected}};
  }

  Json op_put_file(const Json& args) {
    auto rel = args.at("path").get<std::string>();
    if (rel.empty() || rel[0] == '/' || rel.find("..") != std::string::npos)
      throw ValidationError("agent: refusing path " + rel);
    auto full = workdir_ / rel;
    std::filesystem::create_directories(full.parent_path());
    Bytes data = from_base64(args.value("data", ""));
    std::ofstream out(full, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size()));
    out.close();
    if (!out) throw Error("agent: write failed for " + rel);
    if (args.value("exec", false))
      std::filesystem::permissions(full, std::filesystem::perms::owner_all);
    return {{"path", rel}, {"bytes", data.size()}};
  }

  Json op_launch_nodes(const Json& args) {
    Json started = Json::array();
    for (const Json& jn : args.value("nodes", Json::array())) {
      NodeSpec spec = node_spec_from_json(jn);
      behaviors_.push_back(make_behavior(*router_, spec, workdir_));
      behaviors_.back()->start();
      behavior_names_.push_back(spec.name);
      started.push_back(spec.name);
    }
    return {{"started", started}};
  }

  Json op_stop_nodes() {
    for (auto it = behaviors_.rbegin(); it != behaviors_.rend(); ++it) (*it)->stop();
    auto n = behaviors_.size();
    behaviors_.clear();
    behavior_names_.clear();
    return {{"stopped", n}};
  }

  Json op_status() {
    Json nodes = Json::array();
    for (std::size_t i = 0; i < behaviors_.size(); ++i) {
      Json s = behaviors_[i]->status();
      s["name"] = behavior_names_[i];
      nodes.push_back(std::move(s));
    }
    auto rs = router_->stats();
    return {{"machine", cfg_.machine_name},
            {"uptime_us", ex_.now() - started_at_},
            {"nodes", nodes},
            {"delivered_local", rs.delivered_local},
            {"published", rs.published}};
  }

  Json op_exec(const Json& args) {
    auto cmd = args.at("cmd").get<std::string>();
    std::string full = "cd '" + workdir_.string() + "' && (" + cmd + ") 2>&1";
    FILE* pipe = ::popen(full.c_str(), "r");
    if (!pipe) throw Error("agent: popen failed");
    std::string output;
    char buf[4096];
    std::size_t n;
    while ((n = ::fread(buf, 1, sizeof buf, pipe)) > 0) output.append(buf, n);
    int rc = ::pclose(pipe);
    int exit_code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    if (output.size() > 1 << 20) output.resize(1 << 20);
    return {{"output", output}, {"exit_code", exit_code}};
  }

  void heartbeat() {
    if (stopped_) return;
    Json h;
    h["machine"] = cfg_.machine_name;
    h["nodes"] = Json::array();
    for (std::size_t i = 0; i < behaviors_.size(); ++i) {
      Json s = behaviors_[i]->status();
      s["name"] = behavior_names_[i];
      h["nodes"].push_back(std::move(s));
    }
    std::string dumped = h.dump();
    node_->publish(health_topic(cfg_.machine_name), Bytes(dumped.begin(), dumped.end()));
    heartbeat_timer_ = ex_.schedule_after(cfg_.heartbeat_interval, [this] { heartbeat(); });
  }

  Executor& ex_;
  AgentConfig cfg_;
  std::filesystem::path workdir_;
  std::unique_ptr<DatagramSocket> socket_;
  std::unique_ptr<Mesh> mesh_;
  std::unique_ptr<Router> router_;
  Node* node_ = nullptr;
  std::vector<std::unique_ptr<Behavior>> behaviors_;
  std::vector<std::string> behavior_names_;
  std::map<std::uint64_t, Bytes> replied_;
  std::deque<std::uint64_t> replied_order_;
  std::uint64_t heartbeat_timer_ = 0;
  Micros started_at_ = 0;
  bool stopped_ = false;
  bool shutdown_requested_ = false;
};

inline volatile std::sig_atomic_t& agent_stop_flag() {
  static volatile std::sig_atomic_t flag = 0;
  return flag;
}

// Process entry point for `fog agent`: reads config.json from the working
// directory, publishes the bound endpoint, serves until told to stop.
inline int run_agent_process(const std::filesystem::path& workdir) {
  crypto_init();
  std::ifstream in(workdir / "config.json");
  if (!in) {
    std::fprintf(stderr, "agent: no config.json in %s\n", workdir.c_str());
    return 1;
  }
  Json j = Json::parse(in);
  AgentConfig cfg = agent_config_from_json(j);

  RealExecutor ex;
  UdpNetwork net(ex);
  AgentCore core(ex, net, cfg, workdir);
  core.start();

  // Atomic endpoint publication: readers never observe a partial write.
  auto tmp = workdir / "endpoint.tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    out << core.endpoint() << "\n";
  }
  std::filesystem::rename(tmp, workdir / "endpoint");

  ::signal(SIGTERM, [](int) { agent_stop_flag() = 1; });
  ::signal(SIGINT, [](int) { agent_stop_flag() = 1; });
  while (!agent_stop_flag() && !core.shutdown_requested())
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
  if (core.shutdown_requested())  // let the shutdown reply drain
    std::this_thread::sleep_for(std::chrono::milliseconds(200));
  core.shutdown();
  ex.stop();
  return 0;
}

// Spawns machine agents as detached local processes re-executing this very
// binary with the hidden `agent` verb.
class ProcessRuntime : public MachineRuntime {
 public:
  explicit ProcessRuntime(std::filesystem::path self_exe) : exe_(std::move(self_exe)) {}

  long spawn(const std::string& machine_id, const std::filesystem::path& workdir,
             const Json& boot_config) override {
    (void)machine_id;
    std::filesystem::create_directories(workdir);
    {
      auto tmp = workdir / "config.json.tmp";
      std::ofstream out(tmp, std::ios::trunc);
      out << boot_config.dump(2) << "\n";
      out.close();
      ::chmod(tmp.c_str(), 0600);
      std::filesystem::rename(tmp, workdir / "config.json");
    }
    std::filesystem::remove(workdir / "endpoint");
    pid_t pid = ::fork();
    if (pid < 0) throw Error("runtime: fork failed");
    if (pid == 0) {
      ::setsid();  // survive the parent CLI exiting
      int devnull = ::open("/dev/null", O_RDWR);
      ::dup2(devnull, 0);
      int logfd = ::open((workdir / "agent.log").c_str(), O_CREAT | O_WRONLY | O_APPEND, 0644);
      if (logfd >= 0) {
        ::dup2(logfd, 1);
        ::dup2(logfd, 2);
      }
      ::execl(exe_.c_str(), exe_.c_str(), "agent", "--workdir", workdir.c_str(),
              static_cast<char*>(nullptr));
      ::_exit(127);
    }
    return pid;
  }

  bool alive(long pid) override {
    if (pid <= 0) return false;
    // Reap if it is our own zombie child, then probe.
    int status = 0;
    ::waitpid(static_cast<pid_t>(pid), &status, WNOHANG);
    if (::kill(static_cast<pid_t>(pid), 0) != 0) return false;
    std::ifstream stat("/proc/" + std::to_string(pid) + "/stat");
    std::string content((std::istreambuf_iterator<char>(stat)),
                        std::istreambuf_iterator<char>());
    auto paren = content.rfind(')');
    if (paren == std::string::npos || paren + 2 >= content.size()) return false;
    return content[paren + 2] != 'Z';
  }

  void terminate(long pid) override {
    if (pid <= 0) return;
    ::kill(static_cast<pid_t>(pid), SIGTERM);
    for (int i = 0; i < 100; ++i) {
      if (!alive(pid)) return;
      ::usleep(20'000);
    }
    ::kill(static_cast<pid_t>(pid), SIGKILL);
    ::waitpid(static_cast<pid_t>(pid), nullptr, WNOHANG);
  }

 private:
  std::filesystem::path exe_;
};

// Runs each "machine" agent as a thread inside the current process: its own
// executor, UDP socket, and AgentCore. Deployments then run end to end with
// no child processes, which keeps multi-machine tests hermetic.
class InProcessRuntime : public MachineRuntime {
 public:
  long spawn(const std::string& machine_id, const std::filesystem::path& workdir,
             const Json& boot_config) override {
    (void)machine_id;
    auto inst = std::make_unique<Instance>();
    inst->core = std::make_unique<AgentCore>(inst->ex, inst->net,
                                             agent_config_from_json(boot_config), workdir);
    inst->core->start();
    auto tmp = workdir / "endpoint.tmp";
    {
      std::ofstream out(tmp);
      out << inst->core->endpoint() << "\n";
    }
    std::filesystem::rename(tmp, workdir / "endpoint");
    std::lock_guard lk(mu_);
    long pid = next_pid_++;
    instances_[pid] = std::move(inst);
    return pid;
  }

  bool alive(long pid) override {
    std::lock_guard lk(mu_);
    auto it = instances_.find(pid);
    return it != instances_.end() && !it->second->core->shutdown_requested();
  }

  void terminate(long pid) override {
    std::unique_ptr<Instance> inst;
    {
      std::lock_guard lk(mu_);
      auto it = instances_.find(pid);
      if (it == instances_.end()) return;
      inst = std::move(it->second);
      instances_.erase(it);
    }
    inst->core->shutdown();
    inst->ex.stop();    // join the loop first; destruction then races nothing
    inst->core.reset();
  }

  // Reaps agents whose own shutdown op fired (a real process would exit).
  void reap() {
    std::vector<long> done;
    {
      std::lock_guard lk(mu_);
      for (auto& [pid, inst] : instances_)
        if (inst->core->shutdown_requested()) done.push_back(pid);
    }
    for (long pid : done) terminate(pid);
  }

  ~InProcessRuntime() {
    std::vector<long> pids;
    {
      std::lock_guard lk(mu_);
      for (auto& [pid, inst] : instances_) pids.push_back(pid);
    }
    for (long pid : pids) terminate(pid);
  }

 private:
  struct Instance {
    RealExecutor ex;
    UdpNetwork net{ex};
    std::unique_ptr<AgentCore> core;
  };

  std::mutex mu_;
  std::map<long, std::unique_ptr<Instance>> instances_;
  long next_pid_ = 100000;
};

// Request/reply client for machine control topics. Requests are retried with
// the same rid (agents deduplicate), so a retry can never double-apply.
class ControlClient {
 public:
  explicit ControlClient(Router& router)
      : router_(router), rng_(monotonic_now() ^ 0x5bd1e995u) {
    node_ = router_.create_node("ctl-client");
  }

  void track_machine(const std::string& machine) {
    {
      std::lock_guard lk(mu_);
      if (tracked_.count(machine)) return;
      tracked_.insert(machine);
    }
    // Subscribe outside the lock: it hops to the executor thread, which also
    // serves on_reply and must be able to take mu_.
    node_->advertise(control_topic(machine));
    node_->subscribe(control_reply_topic(machine), DeliveryMode::kAcked,
                     [this](const Message& m) { on_reply(m); });
  }

  Json call(const std::string& machine, const std::string& op, Json args,
            Micros timeout = 2'000'000, int attempts = 5) {
    track_machine(machine);
    Json req;
    std::uint64_t rid = (rng_.below(0xffffffffull) << 16) ^ ++rid_counter_;
    req["rid"] = rid;
    req["op"] = op;
    req["args"] = std::move(args);
    std::string dumped = req.dump();
    Bytes payload(dumped.begin(), dumped.end());

    std::unique_lock lk(mu_);
    waiting_[rid] = Json();
    for (int attempt = 0; attempt < attempts; ++attempt) {
      lk.unlock();
      node_->publish(control_topic(machine), payload);
      lk.lock();
      if (cv_.wait_for(lk, std::chrono::microseconds(timeout),
                       [&] { return !waiting_[rid].is_null(); })) {
        Json reply = std::move(waiting_[rid]);
        waiting_.erase(rid);
        if (!reply.value("ok", false))
          throw Error("agent " + machine + ": " + reply.value("error", "request failed"));
        return reply.value("result", Json::object());
      }
    }
    waiting_.erase(rid);
    throw TimeoutError("control call to " + machine + " op " + op + " timed out");
  }

 private:
  void on_reply(const Message& m) {
    Json reply;
    try {
      reply = Json::parse(m.payload.begin(), m.payload.end());
    } catch (const Json::parse_error&) {
      return;
    }
    std::uint64_t rid = reply.value("rid", std::uint64_t{0});
    std::lock_guard lk(mu_);
    auto it = waiting_.find(rid);
    if (it == waiting_.end()) return;  // late duplicate
    it->second = std::move(reply);
    cv_.notify_all();
  }

  Router& router_;
  Node* node_ = nullptr;
  Rng rng_;
  std::uint64_t rid_counter_ = 0;
  std::mutex mu_;
  std::condition_variable cv_;
  std::set<std::string> tracked_;
  std::map<std::uint64_t, Json> waiting_;
};

}  // namespace fogmesh
