#pragma once

#include <unistd.h>

#include <algorithm>
#include <cctype>
#include <condition_variable>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "fogmesh/agent.hpp"
#include "fogmesh/behaviors.hpp"
#include "fogmesh/launch.hpp"
#include "fogmesh/monitor.hpp"
#include "fogmesh/net.hpp"
#include "fogmesh/overlay.hpp"
#include "fogmesh/provision.hpp"
#include "fogmesh/pubsub.hpp"
#include "fogmesh/statedir.hpp"

namespace fogmesh {

// Thrown by test hooks to emulate the orchestrator dying between phases.
// Deliberately not an Error: the degraded-deployment handling must not
// swallow it, exactly as a SIGKILL would not be handled.
struct SimulatedCrash : std::exception {
  const char* what() const noexcept override { return "simulated crash"; }
};

struct StepTiming {
  std::string step;
  std::string machine;
  Micros start = 0;  // relative to launch start
  Micros end = 0;

  double seconds() const { return (end - start) / 1e6; }
};

struct MachineRecord {
  std::string name;
  std::string machine_id;
  BackendKind backend = BackendKind::kMockCloud;
  std::string region;
  std::string instance_type;
  std::string image;
  std::uint16_t host_id = 0;
  std::string overlay_address;
  std::string public_key_hex;
  std::string endpoint;
  long pid = 0;
};

struct DeploymentRecord {
  std::string deployment_id;
  LaunchSpec spec;  // effective spec, compression stages included
  std::string status = "launching";  // launching | running | degraded | deleted
  std::string failed_step;
  std::vector<MachineRecord> machines;
  std::vector<StepTiming> timings;
  std::uint64_t created_at = 0;  // wall clock, microseconds
  std::uint64_t seed = 0;

  double total_seconds() const {
    Micros lo = 0, hi = 0;
    for (const auto& t : timings) {
      if (hi == 0 && lo == 0) lo = t.start;
      lo = std::min(lo, t.start);
      hi = std::max(hi, t.end);
    }
    return (hi - lo) / 1e6;
  }

  const MachineRecord* machine(const std::string& name) const {
    for (const auto& m : machines)
      if (m.name == name) return &m;
    return nullptr;
  }
};

inline Json deployment_record_to_json(const DeploymentRecord& r) {
  Json j;
  j["deployment_id"] = r.deployment_id;
  j["spec"] = launch_spec_to_json(r.spec);
  j["status"] = r.status;
  j["failed_step"] = r.failed_step;
  j["created_at"] = r.created_at;
  j["seed"] = r.seed;
  j["machines"] = Json::array();
  for (const auto& m : r.machines) {
    j["machines"].push_back({{"name", m.name},
                             {"machine_id", m.machine_id},
                             {"backend", backend_name(m.backend)},
                             {"region", m.region},
                             {"instance_type", m.instance_type},
                             {"image", m.image},
                             {"host_id", m.host_id},
                             {"overlay_address", m.overlay_address},
                             {"public_key", m.public_key_hex},
                             {"endpoint", m.endpoint},
                             {"pid", m.pid}});
  }
  j["timings"] = Json::array();
  for (const auto& t : r.timings)
    j["timings"].push_back(
        {{"step", t.step}, {"machine", t.machine}, {"start", t.start}, {"end", t.end}});
  return j;
}

inline DeploymentRecord deployment_record_from_json(const Json& j) {
  DeploymentRecord r;
  r.deployment_id = j.at("deployment_id").get<std::string>();
  r.spec = parse_launch_spec(j.at("spec").dump());
  r.status = j.value("status", "launching");
  r.failed_step = j.value("failed_step", "");
  r.created_at = j.value("created_at", std::uint64_t{0});
  r.seed = j.value("seed", std::uint64_t{0});
  for (const Json& jm : j.value("machines", Json::array())) {
    MachineRecord m;
    m.name = jm.value("name", "");
    m.machine_id = jm.value("machine_id", "");
    m.backend = backend_from_name(jm.value("backend", "mock-cloud"));
    m.region = jm.value("region", "");
    m.instance_type = jm.value("instance_type", "");
    m.image = jm.value("image", "");
    m.host_id = jm.value("host_id", std::uint16_t{0});
    m.overlay_address = jm.value("overlay_address", "");
    m.public_key_hex = jm.value("public_key", "");
    m.endpoint = jm.value("endpoint", "");
    m.pid = jm.value("pid", 0L);
    r.machines.push_back(std::move(m));
  }
  for (const Json& jt : j.value("timings", Json::array()))
    r.timings.push_back({jt.value("step", ""), jt.value("machine", ""),
                         jt.value("start", Micros{0}), jt.value("end", Micros{0})});
  return r;
}

inline KeyPair load_or_create_identity(StateDir& state) {
  auto lock = state.lock();
  if (auto data = state.read(state.identity_file())) {
    while (!data->empty() && std::isspace(static_cast<unsigned char>(data->back())))
      data->pop_back();
    KeyPair kp;
    kp.secret_key = Key32::from_hex_str(*data);
    kp.public_key = x25519_public(kp.secret_key);
    return kp;
  }
  KeyPair kp = generate_keypair();
  state.atomic_write(state.identity_file(), kp.secret_key.hex() + "\n", /*private_mode=*/true);
  return kp;
}

// Drives a DeploymentPlan end to end: provisioning, tunnels, workspace copy,
// peer tables, node launch; owns the persisted deployment records.
class Orchestrator {
 public:
  struct Options {
    double scale = 1.0;
    std::uint64_t seed = 0;               // 0: randomize machine identities
    MachineRuntime* runtime = nullptr;    // injected agent runtime (tests)
    std::filesystem::path agent_exe;      // spawn real processes via this binary
    std::function<void(const std::string&)> progress;
    std::function<void(const std::string&)> boundary_hook;  // fires between steps
    bool launch_robot_nodes = true;
    bool start_monitor = false;
    Json backend_overrides = Json::object();  // keyed by backend name
  };

  Orchestrator(StateDir& state, Options opt) : state_(state), opt_(std::move(opt)) {
    state_.ensure();
    if (!opt_.runtime && !opt_.agent_exe.empty()) {
      owned_runtime_ = std::make_unique<ProcessRuntime>(opt_.agent_exe);
      opt_.runtime = owned_runtime_.get();
    }
    rng_ = std::make_unique<Rng>(opt_.seed ? opt_.seed : monotonic_now());
  }

  ~Orchestrator() {
    monitor_.reset();
    if (plane_) {
      run_on_executor(plane_->ex, [this] {
        for (auto it = plane_->behaviors.rbegin(); it != plane_->behaviors.rend(); ++it)
          (*it)->stop();
        plane_->behaviors.clear();
      });
      plane_->router->stop();
      plane_->mesh->stop();
      plane_->ex.stop();
    }
  }

  BuiltinProvider& provider(BackendKind kind) {
    auto it = providers_.find(kind);
    if (it != providers_.end()) return *it->second;
    BackendConfig cfg = default_backend_config(kind);
    auto ov = opt_.backend_overrides.find(backend_name(kind));
    if (ov != opt_.backend_overrides.end()) cfg = backend_config_from_json(kind, *ov);
    cfg.delays.scale = opt_.scale;
    auto p = std::make_unique<BuiltinProvider>(state_, kind, cfg, opt_.runtime);
    auto& ref = *p;
    providers_[kind] = std::move(p);
    return ref;
  }

  struct DryRun {
    Resolutions resolutions;
    DeploymentPlan plan;  // plan.spec carries inserted codec nodes
    std::vector<std::string> warnings;
  };

  // Resolution and planning without provisioning anything. Region probes do
  // run, so an auto region shows its actual winner.
  DryRun dry_run(const LaunchSpec& raw_spec) {
    validate_launch_spec(raw_spec);
    DryRun out;
    InsertionReport report;
    (void)insert_compression_nodes(raw_spec, &report);
    out.warnings = report.warnings;
    for (const auto& m : raw_spec.machines) resolve_machine(m, out.resolutions);
    out.plan = plan_deployment(raw_spec, out.resolutions, nullptr);
    return out;
  }

  DeploymentRecord execute(const LaunchSpec& raw_spec) {
    validate_launch_spec(raw_spec);
    Micros t0 = monotonic_now();

    DeploymentRecord rec;
    rec.deployment_id = fresh_deployment_id();
    rec.seed = opt_.seed;
    rec.created_at = wall_micros();

    // Resolution happens before planning; each machine's resolve step is
    // timed individually.
    Resolutions res;
    InsertionReport report;
    LaunchSpec effective = insert_compression_nodes(raw_spec, &report);
    for (const auto& w : report.warnings) progress("warning: " + w);

    try {
      for (const auto& m : effective.machines) {
        boundary("resolve:" + m.name);
        Micros s = monotonic_now() - t0;
        resolve_machine(m, res);
        rec.timings.push_back({"resolve", m.name, s, monotonic_now() - t0});
        progress("resolved " + m.name + ": " + res.regions[m.name] + " / " +
                 res.instances[m.name].type_id + " / " + res.images[m.name]);
      }
    } catch (const Error& e) {
      rec.spec = effective;
      rec.status = "degraded";
      rec.failed_step = "resolve";
      persist(rec);
      progress(std::string("resolve failed: ") + e.what());
      return rec;
    }

    DeploymentPlan plan = plan_deployment(raw_spec, res, nullptr);
    rec.spec = plan.spec;
    persist(rec);

    // Assign overlay identities up front so peer-config payloads are
    // complete regardless of per-machine completion order.
    std::vector<MachineSpec> machine_specs = plan.spec.machines;
    std::vector<std::string> machine_names;
    for (const auto& m : machine_specs) machine_names.push_back(m.name);
    auto addresses = assign_overlay_addresses(machine_names);
    std::map<std::string, AgentConfig> agent_configs;
    for (std::size_t i = 0; i < machine_specs.size(); ++i) {
      AgentConfig ac;
      ac.machine_name = machine_specs[i].name;
      ac.host_id = static_cast<std::uint16_t>(2 + i);
      KeyPair kp = opt_.seed ? generate_keypair(rng_->fork_seed()) : generate_keypair();
      ac.private_key = kp.secret_key;
      ac.operator_public = identity().public_key;
      agent_configs[ac.machine_name] = ac;

      MachineRecord mr;
      mr.name = machine_specs[i].name;
      mr.backend = machine_specs[i].backend;
      mr.host_id = ac.host_id;
      mr.overlay_address = addresses.at(mr.name).str();
      mr.public_key_hex = kp.public_key.hex();
      const ResolvedMachine* rm = nullptr;
      for (const auto& p : plan.machines)
        if (p.name == mr.name) rm = &p;
      if (rm) {
        mr.region = rm->region;
        mr.instance_type = rm->instance.type_id;
        mr.image = rm->image;
      }
      rec.machines.push_back(std::move(mr));
    }

    // Per-machine pipelines run in parallel; global steps follow in plan
    // order once every machine pipeline has finished.
    std::exception_ptr failure;
    std::string failed_step_label;
    std::mutex rec_mu;
    PipelineSync sync;
    {
      std::vector<std::thread> threads;
      for (auto& mr : rec.machines) {
        threads.emplace_back([&, this] {
          std::string cur;
          try {
            run_machine_pipeline(plan, mr, agent_configs.at(mr.name), rec, rec_mu, sync, t0,
                                 cur);
          } catch (...) {
            {
              std::lock_guard lk(rec_mu);
              if (!failure) {
                failure = std::current_exception();
                failed_step_label = cur;
              }
              sync.aborted = true;
            }
            sync.cv.notify_all();
          }
        });
      }
      for (auto& th : threads) th.join();
    }
    if (failure) return finish_failure(rec, failure, failed_step_label);

    try {
      for (const auto& st : plan.steps) {
        if (!st.machine.empty()) continue;  // per-machine steps already ran
        boundary(plan_step_name(st.kind));
        Micros s = monotonic_now() - t0;
        run_global_step(st, plan, rec);
        rec.timings.push_back({plan_step_name(st.kind), "", s, monotonic_now() - t0});
        persist(rec);
      }
    } catch (const SimulatedCrash&) {
      throw;
    } catch (const std::exception& e) {
      rec.status = "degraded";
      rec.failed_step = current_step_;
      persist(rec);
      progress(std::string("launch degraded: ") + e.what());
      return rec;
    }

    rec.status = "running";
    persist(rec);
    progress("deployment " + rec.deployment_id + " running");
    return rec;
  }

  void teardown(const std::string& deployment_id) {
    DeploymentRecord rec = load_record(deployment_id);
    if (rec.status == "deleted") return;  // idempotent
    // Stop robot-side behaviors started by this process.
    if (plane_) {
      run_on_executor(plane_->ex, [this] {
        for (auto it = plane_->behaviors.rbegin(); it != plane_->behaviors.rend(); ++it)
          (*it)->stop();
        plane_->behaviors.clear();
      });
    }
    monitor_.reset();
    for (auto it = rec.machines.rbegin(); it != rec.machines.rend(); ++it) {
      if (!it->machine_id.empty()) {
        // Ask the agent to shut down first, but don't bother dialing a
        // process we can already see is gone.
        bool worth_dialing = true;
        if (opt_.runtime && it->pid > 0) worth_dialing = opt_.runtime->alive(it->pid);
        try {
          if (worth_dialing && connect_machine(*it, 1'500'000))
            plane_->ctl->call(it->name, "shutdown", Json::object(), 500'000, 2);
        } catch (const Error&) {
          // agent unreachable; the backend teardown below still applies
        }
        try {
          provider(it->backend).destroy_instance(it->machine_id);
        } catch (const NotFoundError&) {
        }
      }
    }
    rec.status = "deleted";
    persist(rec);
    progress("deployment " + deployment_id + " deleted");
  }

  DeploymentRecord load_record(const std::string& deployment_id) {
    auto file = state_.deployment_file(deployment_id);
    auto data = state_.read(file);
    if (!data) throw NotFoundError("unknown deployment " + deployment_id);
    return deployment_record_from_json(Json::parse(*data));
  }

  std::vector<DeploymentRecord> list() {
    std::vector<DeploymentRecord> out;
    auto dir = state_.deployments_dir();
    if (!std::filesystem::exists(dir)) return out;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
      if (entry.path().extension() != ".json") continue;
      try {
        out.push_back(deployment_record_from_json(Json::parse(*state_.read(entry.path()))));
      } catch (const std::exception&) {
        // unreadable record: surface nothing rather than fail the listing
      }
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
      return a.created_at < b.created_at;
    });
    return out;
  }

  // Listing joined against backend truth: what the records claim, and what
  // the providers actually hold. Orphans are instances tagged with a
  // deployment id whose record does not mention them (a crash between
  // create_instance and record persist leaves exactly this trace).
  Json list_json() {
    Json out;
    out["deployments"] = Json::array();
    std::map<std::string, MachineHandle> by_id;
    for (auto kind : {BackendKind::kMockCloud, BackendKind::kLocalProcess,
                      BackendKind::kWarmPool})
      for (auto& h : provider(kind).list_instances(true)) by_id[h.machine_id] = h;

    std::set<std::string> referenced;
    for (const auto& rec : list()) {
      Json jd;
      jd["deployment_id"] = rec.deployment_id;
      jd["status"] = rec.status;
      jd["created_at"] = rec.created_at;
      jd["machines"] = Json::array();
      for (const auto& m : rec.machines) {
        referenced.insert(m.machine_id);
        Json jm;
        jm["name"] = m.name;
        jm["machine_id"] = m.machine_id;
        jm["region"] = m.region;
        jm["instance_type"] = m.instance_type;
        auto it = by_id.find(m.machine_id);
        jm["backend_state"] =
            it == by_id.end() ? "absent" : machine_state_name(it->second.state);
        jd["machines"].push_back(std::move(jm));
      }
      out["deployments"].push_back(std::move(jd));
    }
    out["orphans"] = Json::array();
    for (const auto& [id, h] : by_id) {
      if (h.deployment_id.empty() || referenced.count(id)) continue;
      if (h.state == MachineState::kTerminated) continue;
      out["orphans"].push_back({{"machine_id", id},
                                {"deployment_id", h.deployment_id},
                                {"state", machine_state_name(h.state)}});
    }
    return out;
  }

  Json health_snapshot(const std::string& deployment_id) {
    DeploymentRecord rec = load_record(deployment_id);
    Json out;
    out["deployment_id"] = deployment_id;
    if (rec.status == "deleted") {
      out["status"] = "deleted";
      out["machines"] = Json::array();
      return out;
    }
    out["machines"] = Json::array();
    bool all_alive = true;
    for (const auto& m : rec.machines) {
      Json jm;
      jm["name"] = m.name;
      bool alive = false;
      Json nodes = Json::array();
      Micros age = -1;
      if (connect_machine(m, 1'500'000)) {
        watch_health(m.name);
        auto hb = last_heartbeat(m.name);
        if (hb) {
          age = monotonic_now() - hb->first;
          alive = age < 5'000'000;
          nodes = hb->second.value("nodes", Json::array());
        }
      }
      if (!alive && opt_.runtime && m.pid > 0) alive = opt_.runtime->alive(m.pid);
      jm["alive"] = alive;
      jm["heartbeat_age_us"] = age;
      jm["nodes"] = std::move(nodes);
      all_alive = all_alive && alive;
      out["machines"].push_back(std::move(jm));
    }
    out["status"] = rec.status == "running" && !all_alive ? "degraded" : rec.status;
    return out;
  }

  // One command on a machine's agent, in its working directory.
  Json attach_exec(const std::string& deployment_id, const std::string& machine,
                   const std::string& cmd) {
    DeploymentRecord rec = load_record(deployment_id);
    if (rec.status == "deleted") throw Error("deployment " + deployment_id + " is deleted");
    const MachineRecord* m = rec.machine(machine);
    if (!m) throw NotFoundError("no machine " + machine + " in " + deployment_id);
    if (!connect_machine(*m, 3'000'000))
      throw Error("machine " + machine + " unreachable");
    return plane_->ctl->call(machine, "exec", Json{{"cmd", cmd}}, 5'000'000, 2);
  }

  Router* robot_router() { return plane_ ? plane_->router.get() : nullptr; }
  Monitor* monitor() { return monitor_.get(); }
  const KeyPair& identity() {
    if (!identity_) identity_ = load_or_create_identity(state_);
    return *identity_;
  }

 private:
  struct RobotPlane {
    RealExecutor ex;
    UdpNetwork net{ex};
    std::unique_ptr<DatagramSocket> socket;
    std::unique_ptr<Mesh> mesh;
    std::unique_ptr<Router> router;
    std::unique_ptr<ControlClient> ctl;
    std::vector<std::unique_ptr<Behavior>> behaviors;
    Node* health_node = nullptr;
    std::mutex hb_mu;
    std::set<std::string> watched;
    std::map<std::string, std::pair<Micros, Json>> heartbeats;
  };

  void progress(const std::string& msg) {
    if (opt_.progress) opt_.progress(msg);
  }

  void boundary(const std::string& label) {
    current_step_ = label;
    if (opt_.boundary_hook) opt_.boundary_hook(label);
  }

  void persist(const DeploymentRecord& rec) {
    auto lock = state_.lock();
    state_.write_json(state_.deployment_file(rec.deployment_id),
                      deployment_record_to_json(rec));
  }

  std::string fresh_deployment_id() {
    std::uint64_t n = wall_micros() ^ (static_cast<std::uint64_t>(::getpid()) << 32);
    char buf[16];
    std::snprintf(buf, sizeof buf, "d-%08llx", static_cast<unsigned long long>(n & 0xffffffff));
    return buf;
  }

  static std::uint64_t wall_micros() {
    return std::chrono::duration_cast<std::chrono::microseconds>(
               std::chrono::system_clock::now().time_since_epoch())
        .count();
  }

  void resolve_machine(const MachineSpec& m, Resolutions& res) {
    auto& prov = provider(m.backend);
    std::string region = m.region;
    if (region == kAuto) {
      auto probes = prov.probe_regions(5);
      region = resolve_region(probes);
    }
    res.regions[m.name] = region;
    if (m.instance_type == kAuto) {
      ResourceSpec req = m.requirements.value_or(ResourceSpec{1, 0, 0});
      res.instances[m.name] = select_instance_type(req, prov.catalog(region));
    } else {
      for (const auto& t : prov.catalog(region))
        if (t.type_id == m.instance_type) res.instances[m.name] = t;
      if (!res.instances.count(m.name))
        throw NotFoundError("machine " + m.name + ": unknown instance type " +
                            m.instance_type);
    }
    bool needs_gpu = m.requirements && m.requirements->gpu_units > 0;
    res.images[m.name] =
        resolve_image(m.image, m.backend, region, needs_gpu, prov.image_infos());
  }

  // Coordinates parallel machine pipelines: peer-config needs every other
  // machine's endpoint, so it waits for all provision steps to land.
  struct PipelineSync {
    std::condition_variable cv;
    bool aborted = false;
  };

  void run_machine_pipeline(const DeploymentPlan& plan, MachineRecord& mr,
                            const AgentConfig& agent_cfg, DeploymentRecord& rec,
                            std::mutex& rec_mu, PipelineSync& sync, Micros t0,
                            std::string& cur_step) {
    auto& prov = provider(mr.backend);
    bool defer_install = false;
    for (const auto& st : plan.steps)
      if (st.kind == PlanStepKind::kInstall && st.machine == mr.name) defer_install = true;

    for (const auto& st : plan.steps) {
      if (st.machine != mr.name) continue;
      if (st.kind == PlanStepKind::kResolve) continue;  // timed earlier
      cur_step = plan_step_name(st.kind) + ":" + mr.name;
      if (opt_.boundary_hook) opt_.boundary_hook(cur_step);
      Micros s = monotonic_now() - t0;
      switch (st.kind) {
        case PlanStepKind::kProvision: {
          Json boot = agent_config_to_json(agent_cfg);
          MachineHandle h = prov.create_instance(mr.region, mr.instance_type, mr.image,
                                                 rec.deployment_id, boot, defer_install);
          {
            std::lock_guard lk(rec_mu);
            mr.machine_id = h.machine_id;
            mr.endpoint = h.endpoint;
            mr.pid = h.pid;
          }
          sync.cv.notify_all();
          break;
        }
        case PlanStepKind::kInstall:
          prov.install(mr.machine_id);
          break;
        case PlanStepKind::kTunnelSetup: {
          if (!connect_machine(mr, 10'000'000))
            throw TimeoutError("handshake with " + mr.name + " timed out");
          plane_->ctl->call(mr.name, "ping", Json::object(), 1'000'000, 10);
          break;
        }
        case PlanStepKind::kWorkspaceCopy:
          workspace_copy(mr, rec);
          break;
        case PlanStepKind::kPeerConfig: {
          {
            std::unique_lock lk(rec_mu);
            sync.cv.wait(lk, [&] {
              if (sync.aborted) return true;
              for (const auto& m : rec.machines)
                if (m.machine_id.empty()) return false;
              return true;
            });
            if (sync.aborted) throw Error("peer machine failed to provision");
          }
          peer_config(mr, rec);
          break;
        }
        default:
          break;
      }
      {
        std::lock_guard lk(rec_mu);
        rec.timings.push_back({plan_step_name(st.kind), mr.name, s, monotonic_now() - t0});
        persist(rec);
      }
      progress(plan_step_name(st.kind) + " " + mr.name + " done");
    }
  }

  DeploymentRecord finish_failure(DeploymentRecord& rec, std::exception_ptr ep,
                                  const std::string& step_label) {
    try {
      std::rethrow_exception(ep);
    } catch (const SimulatedCrash&) {
      throw;
    } catch (const std::exception& e) {
      rec.status = "degraded";
      rec.failed_step = step_label;
      persist(rec);
      progress(std::string("launch degraded at ") + step_label + ": " + e.what());
      return rec;
    }
  }

  void run_global_step(const PlanStep& st, const DeploymentPlan& plan, DeploymentRecord& rec) {
    switch (st.kind) {
      case PlanStepKind::kCompressionInsert:
        break;  // applied when the plan was computed
      case PlanStepKind::kMonitorStart:
        if (opt_.start_monitor && plan.spec.monitor) {
          ensure_plane();
          BridgeConfig bc;
          bc.port = plan.spec.monitor->port;
          bc.topics = plan.spec.monitor->topics;
          monitor_ = std::make_unique<Monitor>(*plane_->router, bc);
          monitor_->start();
          progress("monitor listening at " + monitor_->url());
        }
        break;
      case PlanStepKind::kLaunchCloudNodes:
        for (const auto& mr : rec.machines) {
          Json nodes = Json::array();
          for (const NodeSpec* n : plan.nodes_on(mr.name))
            nodes.push_back(node_spec_to_json(rewrite_for_agent(*n)));
          if (nodes.empty()) continue;
          plane_->ctl->call(mr.name, "launch-nodes", Json{{"nodes", nodes}}, 3'000'000, 3);
        }
        break;
      case PlanStepKind::kLaunchRobotNodes:
        if (opt_.launch_robot_nodes) {
          auto robot_nodes = plan.nodes_on(kRobotMachine);
          if (!robot_nodes.empty()) {
            ensure_plane();
            for (const NodeSpec* n : robot_nodes) {
              plane_->behaviors.push_back(make_behavior(*plane_->router, *n));
              plane_->behaviors.back()->start();
            }
          }
        }
        break;
      default:
        break;
    }
  }

  // Uploads the machine's share of the workspace: its node manifest plus any
  // custom executables, which the launch payload then references by their
  // agent-side path.
  void workspace_copy(const MachineRecord& mr, const DeploymentRecord& rec) {
    Json nodes = Json::array();
    for (const auto& n : rec.spec.nodes)
      if (n.machine == mr.name) nodes.push_back(node_spec_to_json(rewrite_for_agent(n)));
    Json manifest{{"deployment", rec.deployment_id}, {"nodes", nodes}};
    std::string dumped = manifest.dump(2);
    plane_->ctl->call(mr.name, "put-file",
                      Json{{"path", "nodes.json"},
                           {"data", to_base64(ByteView(
                                        reinterpret_cast<const std::uint8_t*>(dumped.data()),
                                        dumped.size()))}},
                      3'000'000, 3);
    for (const auto& n : rec.spec.nodes) {
      if (n.machine != mr.name || n.behavior != "custom-executable") continue;
      auto path = n.params.at("path");
      std::ifstream in(path, std::ios::binary);
      if (!in) throw Error("custom executable not readable: " + path);
      std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
      plane_->ctl->call(
          mr.name, "put-file",
          Json{{"path", "bin/" + n.name},
               {"data", to_base64(ByteView(reinterpret_cast<const std::uint8_t*>(blob.data()),
                                           blob.size()))},
               {"exec", true}},
          10'000'000, 3);
    }
  }

  // Agents run custom executables from their own workspace copy.
  static NodeSpec rewrite_for_agent(const NodeSpec& n) {
    NodeSpec out = n;
    if (out.behavior == "custom-executable") out.params["path"] = "./bin/" + out.name;
    return out;
  }

  void peer_config(const MachineRecord& mr, const DeploymentRecord& rec) {
    Json peers = Json::array();
    // The operator plane; agents never dial it (it dialed them already).
    peers.push_back({{"name", kRobotMachine},
                     {"host_id", 1},
                     {"public_key", identity().public_key.hex()},
                     {"endpoint", plane_->mesh->local_endpoint()},
                     {"initiate", false}});
    for (const auto& other : rec.machines) {
      if (other.name == mr.name) continue;
      peers.push_back({{"name", other.name},
                       {"host_id", other.host_id},
                       {"public_key", other.public_key_hex},
                       {"endpoint", other.endpoint},
                       // one side dials: deterministic by host id
                       {"initiate", mr.host_id > other.host_id}});
    }
    plane_->ctl->call(mr.name, "peer-config", Json{{"peers", peers}}, 3'000'000, 3);
  }

  void ensure_plane() {
    std::lock_guard lk(plane_mu_);
    if (plane_) return;
    auto plane = std::make_unique<RobotPlane>();
    plane->socket = plane->net.open("127.0.0.1", 0);
    Mesh::Config mc;
    mc.identity = identity();
    plane->mesh = std::make_unique<Mesh>(plane->ex, *plane->socket, mc);
    Router::Config rc;
    rc.machine_name = kRobotMachine;
    rc.host_id = 1;
    plane->router = std::make_unique<Router>(plane->ex, *plane->mesh, rc);
    plane->ctl = std::make_unique<ControlClient>(*plane->router);
    plane_ = std::move(plane);
  }

  // Establishes (or reuses) the overlay session to one machine agent.
  bool connect_machine(const MachineRecord& mr, Micros timeout) {
    if (mr.endpoint.empty() || mr.public_key_hex.empty()) return false;
    ensure_plane();
    Key32 pub = Key32::from_hex_str(mr.public_key_hex);
    if (plane_->mesh->has_session(pub)) return true;
    plane_->mesh->allow_peer(pub);
    std::mutex mu;
    std::condition_variable cv;
    bool done = false, ok = false;
    plane_->mesh->connect(pub, mr.endpoint, [&](bool established) {
      std::lock_guard lk(mu);
      done = true;
      ok = established;
      cv.notify_all();
    });
    std::unique_lock lk(mu);
    cv.wait_for(lk, std::chrono::microseconds(timeout), [&] { return done; });
    if (!ok) return false;
    plane_->router->add_peer(pub, mr.host_id);
    return true;
  }

  void watch_health(const std::string& machine) {
    ensure_plane();
    std::unique_lock lk(plane_->hb_mu);
    if (plane_->watched.count(machine)) return;
    plane_->watched.insert(machine);
    lk.unlock();
    if (!plane_->health_node) plane_->health_node = plane_->router->create_node("health-watch");
    plane_->health_node->subscribe(
        health_topic(machine), DeliveryMode::kBestEffort, [this](const Message& m) {
          try {
            Json h = Json::parse(m.payload.begin(), m.payload.end());
            std::string from = h.value("machine", "");
            std::lock_guard lk2(plane_->hb_mu);
            plane_->heartbeats[from] = {monotonic_now(), std::move(h)};
          } catch (const Json::parse_error&) {
          }
        });
    // Give the first heartbeat a chance to arrive.
    std::this_thread::sleep_for(std::chrono::milliseconds(1200));
  }

  std::optional<std::pair<Micros, Json>> last_heartbeat(const std::string& machine) {
    std::lock_guard lk(plane_->hb_mu);
    auto it = plane_->heartbeats.find(machine);
    if (it == plane_->heartbeats.end()) return std::nullopt;
    return it->second;
  }

  StateDir& state_;
  Options opt_;
  std::unique_ptr<ProcessRuntime> owned_runtime_;
  std::unique_ptr<Rng> rng_;
  std::optional<KeyPair> identity_;
  std::map<BackendKind, std::unique_ptr<BuiltinProvider>> providers_;
  std::unique_ptr<RobotPlane> plane_;
  std::mutex plane_mu_;
  std::unique_ptr<Monitor> monitor_;
  std::string current_step_;
};

}  // namespace fogmesh
