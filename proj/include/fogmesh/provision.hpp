#pragma once

#include <chrono>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "fogmesh/bytes.hpp"
#include "fogmesh/errors.hpp"
#include "fogmesh/executor.hpp"
#include "fogmesh/launch.hpp"
#include "fogmesh/net.hpp"
#include "fogmesh/statedir.hpp"

namespace fogmesh {

struct DelayConfig {
  double boot = 0.40;
  double install = 2.35;
  double image_copy = 0.45;
  double scheduling = 0.29;
  double scale = 1.0;
};

struct RegionInfo {
  std::string region_id;
  double base_rtt_ms = 10.0;
  double bandwidth_mbps = 50.0;
};

enum class MachineState {
  kProvisioning,
  kInstalling,
  kReady,
  kTerminated,
};

inline std::string machine_state_name(MachineState s) {
  switch (s) {
    case MachineState::kProvisioning: return "provisioning";
    case MachineState::kInstalling: return "installing";
    case MachineState::kReady: return "ready";
    case MachineState::kTerminated: return "terminated";
  }
  return "?";
}

inline MachineState machine_state_from_name(const std::string& s) {
  if (s == "provisioning") return MachineState::kProvisioning;
  if (s == "installing") return MachineState::kInstalling;
  if (s == "ready") return MachineState::kReady;
  if (s == "terminated") return MachineState::kTerminated;
  throw ParseError("unknown machine state: " + s);
}

struct PhaseSpan {
  std::string phase;
  Micros start = 0;
  Micros end = 0;

  double seconds() const { return (end - start) / 1e6; }
};

struct MachineHandle {
  std::string machine_id;
  BackendKind backend = BackendKind::kMockCloud;
  std::string region;
  std::string type_id;
  std::string image;
  MachineState state = MachineState::kProvisioning;
  std::string endpoint;
  std::vector<PhaseSpan> boot_timeline;
  std::string deployment_id;
  long pid = 0;
  std::uint64_t created_at = 0;  // wall clock, microseconds

  double ready_seconds() const {
    double total = 0;
    for (const auto& p : boot_timeline) total += p.seconds();
    return total;
  }
};

inline Json machine_handle_to_json(const MachineHandle& h) {
  Json j;
  j["machine_id"] = h.machine_id;
  j["backend"] = backend_name(h.backend);
  j["region"] = h.region;
  j["type_id"] = h.type_id;
  j["image"] = h.image;
  j["state"] = machine_state_name(h.state);
  j["endpoint"] = h.endpoint;
  j["deployment_id"] = h.deployment_id;
  j["pid"] = h.pid;
  j["created_at"] = h.created_at;
  j["boot_timeline"] = Json::array();
  for (const auto& p : h.boot_timeline)
    j["boot_timeline"].push_back({{"phase", p.phase}, {"start", p.start}, {"end", p.end}});
  return j;
}

inline MachineHandle machine_handle_from_json(const Json& j) {
  MachineHandle h;
  h.machine_id = j.at("machine_id").get<std::string>();
  h.backend = backend_from_name(j.at("backend").get<std::string>());
  h.region = j.value("region", "");
  h.type_id = j.value("type_id", "");
  h.image = j.value("image", "");
  h.state = machine_state_from_name(j.at("state").get<std::string>());
  h.endpoint = j.value("endpoint", "");
  h.deployment_id = j.value("deployment_id", "");
  h.pid = j.value("pid", 0L);
  h.created_at = j.value("created_at", 0ULL);
  for (const Json& p : j.value("boot_timeline", Json::array()))
    h.boot_timeline.push_back(
        {p.at("phase").get<std::string>(), p.at("start").get<Micros>(),
         p.at("end").get<Micros>()});
  return h;
}

struct ImageRecord {
  std::string image_id;
  std::string backend;
  std::string region;
  std::set<std::string> tags;
  std::uint64_t created_at = 0;
  bool preinstalled = false;
};

inline Json image_record_to_json(const ImageRecord& r) {
  Json j;
  j["image_id"] = r.image_id;
  j["backend"] = r.backend;
  j["region"] = r.region;
  j["tags"] = r.tags;
  j["created_at"] = r.created_at;
  j["preinstalled"] = r.preinstalled;
  return j;
}

inline ImageRecord image_record_from_json(const Json& j) {
  ImageRecord r;
  r.image_id = j.at("image_id").get<std::string>();
  r.backend = j.value("backend", "");
  r.region = j.value("region", "");
  for (const Json& t : j.value("tags", Json::array()))
    r.tags.insert(t.get<std::string>());
  r.created_at = j.value("created_at", 0ULL);
  r.preinstalled = j.value("preinstalled", false);
  return r;
}

// The startup cost decomposition for one acquisition. Pure; shared by the
// real backends (which sleep through it) and the simulated benchmarks (which
// schedule it on a virtual clock).
inline std::vector<std::pair<std::string, double>> phase_plan(BackendKind backend,
                                                              bool preinstalled,
                                                              const DelayConfig& d,
                                                              bool pool_hit = true) {
  std::vector<std::pair<std::string, double>> phases;
  auto s = [&](double v) { return v * d.scale; };
  switch (backend) {
    case BackendKind::kMockCloud:
      phases.emplace_back("boot", s(d.boot));
      if (preinstalled)
        phases.emplace_back("image-copy", s(d.image_copy));
      else
        phases.emplace_back("install", s(d.install));
      break;
    case BackendKind::kLocalProcess:
      if (!preinstalled) phases.emplace_back("install", s(d.install));
      break;
    case BackendKind::kWarmPool:
      if (pool_hit) {
        phases.emplace_back("scheduling", s(d.scheduling));
      } else {
        phases.emplace_back("boot", s(d.boot));
        if (preinstalled)
          phases.emplace_back("image-copy", s(d.image_copy));
        else
          phases.emplace_back("install", s(d.install));
      }
      break;
  }
  return phases;
}

struct BackendConfig {
  std::vector<RegionInfo> regions;
  std::vector<InstanceType> catalog;
  DelayConfig delays;
  int pool_size = 0;        // warm-pool
  bool pool_growth = true;  // warm-pool
  std::uint64_t probe_seed = 1;
};

inline BackendConfig default_backend_config(BackendKind kind) {
  BackendConfig c;
  switch (kind) {
    case BackendKind::kMockCloud:
    case BackendKind::kWarmPool:
      c.regions = {{"us-west-1", 6.1, 72.0}, {"us-east-2", 74.0, 13.0}};
      c.catalog = {
          {"small", 2, 4096, 0, 0.05},
          {"medium", 4, 16384, 0, 0.10},
          {"large", 8, 32768, 0, 0.40},
          {"gpu-large", 8, 32768, 1, 1.20},
      };
      break;
    case BackendKind::kLocalProcess:
      c.regions = {{"local", 0.2, 1000.0}};
      c.catalog = {{"local", 4, 8192, 0, 0.01}};
      break;
  }
  if (kind == BackendKind::kWarmPool) c.pool_size = 2;
  return c;
}

inline BackendConfig backend_config_from_json(BackendKind kind, const Json& j) {
  BackendConfig c = default_backend_config(kind);
  if (j.contains("regions")) {
    c.regions.clear();
    for (const auto& [id, jr] : j.at("regions").items())
      c.regions.push_back({id, jr.value("base_rtt_ms", 10.0), jr.value("bandwidth_mbps", 50.0)});
  }
  if (j.contains("catalog")) {
    c.catalog.clear();
    for (const Json& jt : j.at("catalog"))
      c.catalog.push_back({jt.at("type_id").get<std::string>(), jt.value("cpu_cores", 1),
                           jt.value("memory_mib", 0L), jt.value("gpu_units", 0),
                           jt.value("hourly_price", 0.01)});
  }
  if (j.contains("delays")) {
    const Json& jd = j.at("delays");
    c.delays.boot = jd.value("boot", c.delays.boot);
    c.delays.install = jd.value("install", c.delays.install);
    c.delays.image_copy = jd.value("image_copy", c.delays.image_copy);
    c.delays.scheduling = jd.value("scheduling", c.delays.scheduling);
    c.delays.scale = jd.value("scale", c.delays.scale);
  }
  c.pool_size = j.value("pool_size", c.pool_size);
  c.pool_growth = j.value("pool_growth", c.pool_growth);
  c.probe_seed = j.value("probe_seed", c.probe_seed);
  return c;
}

// Hook for running a machine as a local agent process. Provision stays
// decoupled from process mechanics; tests substitute a fake.
class MachineRuntime {
 public:
  virtual ~MachineRuntime() = default;
  // Returns pid; the agent is expected to write "<workdir>/endpoint" when up.
  virtual long spawn(const std::string& machine_id, const std::filesystem::path& workdir,
                     const Json& boot_config) = 0;
  virtual bool alive(long pid) = 0;
  virtual void terminate(long pid) = 0;
};

class Provider {
 public:
  virtual ~Provider() = default;
  virtual BackendKind kind() const = 0;
  virtual std::vector<RegionInfo> regions() = 0;
  virtual std::vector<InstanceType> catalog(const std::string& region) = 0;
  virtual std::map<std::string, std::vector<double>> probe_regions(int samples) = 0;
  virtual MachineHandle create_instance(const std::string& region, const std::string& type_id,
                                        const std::string& image_id,
                                        const std::string& deployment_id,
                                        const Json& boot_config) = 0;
  virtual void destroy_instance(const std::string& machine_id) = 0;
  virtual std::vector<MachineHandle> list_instances(bool include_terminated) = 0;
  virtual ImageRecord build_image(const std::string& region, const std::string& base,
                                  const std::set<std::string>& tags) = 0;
};

// The three shipped backends, differing in phase plans, region geography and
// pool bookkeeping; all persist handles/images/pool state under the state
// directory so separate processes (CLI vs orchestrator) share one view.
class BuiltinProvider : public Provider {
 public:
  using Sleeper = std::function<void(double seconds)>;

  BuiltinProvider(StateDir& state, BackendKind kind, BackendConfig cfg,
                  MachineRuntime* runtime = nullptr, Sleeper sleeper = nullptr)
      : state_(state),
        kind_(kind),
        cfg_(std::move(cfg)),
        runtime_(runtime),
        sleeper_(sleeper ? std::move(sleeper) : [](double s) {
          std::this_thread::sleep_for(std::chrono::duration<double>(s));
        }),
        probe_rng_(cfg_.probe_seed) {}

  BackendKind kind() const override { return kind_; }

  std::vector<RegionInfo> regions() override { return cfg_.regions; }

  std::vector<InstanceType> catalog(const std::string& region) override {
    require_region(region);
    return cfg_.catalog;
  }

  // RTT samples per region: configured base plus bounded jitter.
  std::map<std::string, std::vector<double>> probe_regions(int samples) override {
    std::lock_guard lk(mu_);
    std::map<std::string, std::vector<double>> out;
    for (const auto& r : cfg_.regions) {
      auto& v = out[r.region_id];
      for (int i = 0; i < samples; ++i)
        v.push_back(std::max(0.05, r.base_rtt_ms + probe_rng_.uniform(-1.0, 1.0)));
    }
    return out;
  }

  LinkModel link_model_for(const std::string& region) const {
    for (const auto& r : cfg_.regions)
      if (r.region_id == region)
        return LinkModel{r.bandwidth_mbps * 1e6, r.base_rtt_ms / 2.0, 0.0};
    throw NotFoundError("provision: unknown region " + region);
  }

  MachineHandle create_instance(const std::string& region, const std::string& type_id,
                                const std::string& image_id, const std::string& deployment_id,
                                const Json& boot_config) override {
    return create_instance(region, type_id, image_id, deployment_id, boot_config, false);
  }

  // With defer_install the handle is returned in `installing` state and the
  // caller pays the install phase later via install(); this lets a driver
  // time provision and install as distinct steps. Warm-pool and preinstalled
  // images have no install phase and ignore the flag.
  MachineHandle create_instance(const std::string& region, const std::string& type_id,
                                const std::string& image_id, const std::string& deployment_id,
                                const Json& boot_config, bool defer_install) {
    require_region(region);
    require_type(type_id);
    bool preinstalled = image_preinstalled(image_id);
    bool pool_hit = false;
    if (kind_ == BackendKind::kWarmPool) {
      auto lock = state_.lock();
      Json pool = state_.read_json(state_.pool_file(), Json::object());
      int available = pool.value("available", 0);
      if (available > 0) {
        pool["available"] = available - 1;
        state_.write_json(state_.pool_file(), pool);
        pool_hit = true;
      } else if (!cfg_.pool_growth) {
        throw CapacityError("provision: warm pool empty and growth disabled");
      }
    }

    MachineHandle h;
    h.machine_id = fresh_machine_id();
    h.backend = kind_;
    h.region = region;
    h.type_id = type_id;
    h.image = image_id;
    h.deployment_id = deployment_id;
    h.state = MachineState::kProvisioning;
    h.created_at = wall_micros();
    persist_handle(h);

    auto phases = phase_plan(kind_, preinstalled, cfg_.delays, pool_hit);
    bool install_deferred = false;
    for (const auto& [phase, dur] : phases) {
      if (phase == "install") {
        if (defer_install) {
          install_deferred = true;
          continue;
        }
        h.state = MachineState::kInstalling;
        persist_handle(h);
      }
      PhaseSpan span{phase, monotonic_now(), 0};
      sleeper_(dur);
      span.end = monotonic_now();
      h.boot_timeline.push_back(span);
    }

    if (runtime_ && !boot_config.is_null()) {
      auto workdir = state_.machine_workdir(h.machine_id);
      std::filesystem::create_directories(workdir);
      PhaseSpan span{"agent-spawn", monotonic_now(), 0};
      h.pid = runtime_->spawn(h.machine_id, workdir, boot_config);
      h.endpoint = wait_for_endpoint(workdir);
      span.end = monotonic_now();
      h.boot_timeline.push_back(span);
    }

    h.state = install_deferred ? MachineState::kInstalling : MachineState::kReady;
    persist_handle(h);
    return h;
  }

  // Pays the deferred install phase and brings the machine to ready.
  MachineHandle install(const std::string& machine_id) {
    MachineHandle h = lookup(machine_id);
    if (h.state == MachineState::kReady) return h;  // nothing deferred
    if (h.state != MachineState::kInstalling)
      throw ValidationError("provision: machine " + machine_id + " is " +
                            machine_state_name(h.state) + ", cannot install");
    PhaseSpan span{"install", monotonic_now(), 0};
    sleeper_(cfg_.delays.install * cfg_.delays.scale);
    span.end = monotonic_now();
    h.boot_timeline.push_back(span);
    h.state = MachineState::kReady;
    persist_handle(h);
    return h;
  }

  MachineHandle lookup(const std::string& machine_id) {
    auto lock = state_.lock();
    Json all = state_.read_json(state_.instances_file(), Json::object());
    if (!all.contains(machine_id))
      throw NotFoundError("provision: unknown machine " + machine_id);
    return machine_handle_from_json(all[machine_id]);
  }

  void destroy_instance(const std::string& machine_id) override {
    auto lock = state_.lock();
    Json all = state_.read_json(state_.instances_file(), Json::object());
    if (!all.contains(machine_id))
      throw NotFoundError("provision: unknown machine " + machine_id);
    MachineHandle h = machine_handle_from_json(all[machine_id]);
    if (h.state == MachineState::kTerminated) return;  // idempotent
    if (h.pid > 0 && runtime_) runtime_->terminate(h.pid);
    if (h.backend == BackendKind::kWarmPool) {
      Json pool = state_.read_json(state_.pool_file(), Json::object());
      pool["available"] = pool.value("available", 0) + 1;
      state_.write_json(state_.pool_file(), pool);
    }
    h.state = MachineState::kTerminated;
    all[h.machine_id] = machine_handle_to_json(h);
    state_.write_json(state_.instances_file(), all);
  }

  std::vector<MachineHandle> list_instances(bool include_terminated) override {
    auto lock = state_.lock();
    Json all = state_.read_json(state_.instances_file(), Json::object());
    std::vector<MachineHandle> out;
    for (const auto& [id, j] : all.items()) {
      MachineHandle h = machine_handle_from_json(j);
      if (h.backend != kind_) continue;
      if (!include_terminated && h.state == MachineState::kTerminated) continue;
      out.push_back(std::move(h));
    }
    return out;
  }

  ImageRecord build_image(const std::string& region, const std::string& base,
                          const std::set<std::string>& tags) override {
    require_region(region);
    {
      auto lock = state_.lock();
      if (base != kDefaultImage) {
        Json reg = state_.read_json(state_.images_file(), Json::object());
        if (!reg.contains(base))
          throw NotFoundError("provision: unknown base image " + base);
      }
    }
    // The install cost is charged once, now, instead of at every launch.
    sleeper_(cfg_.delays.install * cfg_.delays.scale);
    auto lock = state_.lock();
    Json reg = state_.read_json(state_.images_file(), Json::object());
    ImageRecord r;
    r.image_id = "img-" + std::to_string(reg.size() + 1) + "-" +
                 std::to_string(wall_micros() % 100000);
    r.backend = backend_name(kind_);
    r.region = region;
    r.tags = tags;
    r.preinstalled = true;
    std::uint64_t now = wall_micros();
    for (const auto& [id, j] : reg.items())
      now = std::max(now, j.value("created_at", std::uint64_t{0}) + 1);
    r.created_at = now;
    reg[r.image_id] = image_record_to_json(r);
    state_.write_json(state_.images_file(), reg);
    return r;
  }

  std::vector<ImageRecord> images() {
    auto lock = state_.lock();
    Json reg = state_.read_json(state_.images_file(), Json::object());
    std::vector<ImageRecord> out;
    for (const auto& [id, j] : reg.items()) out.push_back(image_record_from_json(j));
    return out;
  }

  void delete_image(const std::string& image_id) {
    auto lock = state_.lock();
    Json reg = state_.read_json(state_.images_file(), Json::object());
    if (!reg.contains(image_id)) throw NotFoundError("provision: unknown image " + image_id);
    reg.erase(image_id);
    state_.write_json(state_.images_file(), reg);
  }

  std::vector<ImageInfo> image_infos() {
    std::vector<ImageInfo> out;
    for (const auto& r : images())
      out.push_back({r.image_id, r.backend, r.region, r.tags, r.created_at});
    return out;
  }

  struct PoolState {
    int configured = 0;
    int available = 0;
    bool growth = true;
    std::string instance_type;
  };

  PoolState warm_pool_configure(int size, const std::string& type_id, bool growth) {
    if (size < 0) throw ValidationError("provision: negative pool size");
    require_type(type_id);
    // Pre-starting the pool pays the full boot+install once, up front.
    if (size > 0) sleeper_((cfg_.delays.boot + cfg_.delays.install) * cfg_.delays.scale);
    auto lock = state_.lock();
    Json pool;
    pool["configured"] = size;
    pool["available"] = size;
    pool["growth"] = growth;
    pool["instance_type"] = type_id;
    state_.write_json(state_.pool_file(), pool);
    cfg_.pool_growth = growth;
    return PoolState{size, size, growth, type_id};
  }

  PoolState pool_state() {
    auto lock = state_.lock();
    Json pool = state_.read_json(state_.pool_file(), Json::object());
    return PoolState{pool.value("configured", 0), pool.value("available", 0),
                     pool.value("growth", true), pool.value("instance_type", "")};
  }

  const BackendConfig& config() const { return cfg_; }

 private:
  void require_region(const std::string& region) const {
    for (const auto& r : cfg_.regions)
      if (r.region_id == region) return;
    throw NotFoundError("provision: unknown region " + region);
  }

  void require_type(const std::string& type_id) const {
    for (const auto& t : cfg_.catalog)
      if (t.type_id == type_id) return;
    throw NotFoundError("provision: unknown instance type " + type_id);
  }

  bool image_preinstalled(const std::string& image_id) {
    if (image_id == kDefaultImage) return false;
    auto lock = state_.lock();
    Json reg = state_.read_json(state_.images_file(), Json::object());
    if (!reg.contains(image_id))
      throw NotFoundError("provision: unknown image " + image_id);
    return reg[image_id].value("preinstalled", false);
  }

  std::string fresh_machine_id() {
    std::lock_guard lk(mu_);
    std::uint64_t n = wall_micros() ^ (static_cast<std::uint64_t>(::getpid()) << 40) ^
                      (++id_counter_ << 56);
    char buf[24];
    std::snprintf(buf, sizeof buf, "m-%010llx", static_cast<unsigned long long>(n & 0xffffffffffull));
    return buf;
  }

  void persist_handle(const MachineHandle& h) {
    auto lock = state_.lock();
    Json all = state_.read_json(state_.instances_file(), Json::object());
    all[h.machine_id] = machine_handle_to_json(h);
    state_.write_json(state_.instances_file(), all);
  }

  std::string wait_for_endpoint(const std::filesystem::path& workdir) {
    auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(10);
    auto file = workdir / "endpoint";
    while (std::chrono::steady_clock::now() < deadline) {
      if (auto data = state_.read(file)) {
        while (!data->empty() && (data->back() == '\n' || data->back() == '\r'))
          data->pop_back();
        if (!data->empty()) return *data;
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    throw TimeoutError("provision: agent endpoint not published in time");
  }

  static std::uint64_t wall_micros() {
    return std::chrono::duration_cast<std::chrono::microseconds>(
               std::chrono::system_clock::now().time_since_epoch())
        .count();
  }

  StateDir& state_;
  BackendKind kind_;
  BackendConfig cfg_;
  MachineRuntime* runtime_;
  Sleeper sleeper_;
  std::mutex mu_;
  Rng probe_rng_;
  std::uint64_t id_counter_ = 0;
};

}  // namespace fogmesh
