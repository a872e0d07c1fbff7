#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fogmesh/errors.hpp"

namespace fogmesh {

using Json = nlohmann::json;

inline constexpr const char* kAuto = "auto";
inline constexpr const char* kDefaultImage = "default";
inline constexpr const char* kRobotMachine = "robot";

enum class BackendKind {
  kMockCloud,
  kLocalProcess,
  kWarmPool,
};

inline std::string backend_name(BackendKind b) {
  switch (b) {
    case BackendKind::kMockCloud: return "mock-cloud";
    case BackendKind::kLocalProcess: return "local-process";
    case BackendKind::kWarmPool: return "warm-pool";
  }
  return "?";
}

inline BackendKind backend_from_name(const std::string& s) {
  if (s == "mock-cloud") return BackendKind::kMockCloud;
  if (s == "local-process") return BackendKind::kLocalProcess;
  if (s == "warm-pool") return BackendKind::kWarmPool;
  throw ParseError("unknown backend-id: " + s, 0, "backend");
}

enum class CodecMode {
  kRaw,
  kPerFrame,
  kStreaming,
};

inline std::string codec_mode_name(CodecMode m) {
  switch (m) {
    case CodecMode::kRaw: return "raw";
    case CodecMode::kPerFrame: return "per-frame";
    case CodecMode::kStreaming: return "streaming";
  }
  return "?";
}

inline CodecMode codec_mode_from_name(const std::string& s) {
  if (s == "raw") return CodecMode::kRaw;
  if (s == "per-frame") return CodecMode::kPerFrame;
  if (s == "streaming") return CodecMode::kStreaming;
  throw ParseError("unknown codec mode: " + s, 0, "mode");
}

struct ResourceSpec {
  int cpu_cores = 1;
  long memory_mib = 0;
  int gpu_units = 0;
};

struct MachineSpec {
  std::string name;
  BackendKind backend = BackendKind::kMockCloud;
  std::string region = kAuto;
  std::string instance_type = kAuto;  // type-id, or kAuto with requirements
  std::optional<ResourceSpec> requirements;
  std::string image = kAuto;
};

inline const std::set<std::string>& builtin_behaviors() {
  static const std::set<std::string> ids = {
      "image-source", "echo-ack", "synthetic-compute", "sink",
      "custom-executable", "encoder", "decoder"};
  return ids;
}

struct NodeSpec {
  std::string name;
  std::string behavior;
  std::map<std::string, std::string> params;
  std::string machine = kRobotMachine;
  std::vector<std::string> publishes;
  std::vector<std::string> subscribes;
  std::map<std::string, std::string> remaps;

  std::string effective(const std::string& topic) const {
    auto it = remaps.find(topic);
    return it == remaps.end() ? topic : it->second;
  }
};

struct CompressionDirective {
  std::string topic;
  CodecMode mode = CodecMode::kStreaming;
};

struct MonitorSpec {
  std::uint16_t port = 8765;
  std::vector<std::string> topics;
};

struct LaunchSpec {
  std::string name;
  std::vector<MachineSpec> machines;
  std::vector<NodeSpec> nodes;
  std::vector<CompressionDirective> compression;
  std::optional<MonitorSpec> monitor;

  const MachineSpec* machine(const std::string& n) const {
    for (const auto& m : machines)
      if (m.name == n) return &m;
    return nullptr;
  }
  const NodeSpec* node(const std::string& n) const {
    for (const auto& nd : nodes)
      if (nd.name == n) return &nd;
    return nullptr;
  }
};

// --- validation ---------------------------------------------------------------

inline void validate_launch_spec(const LaunchSpec& spec) {
  if (spec.name.empty()) throw ValidationError("spec: missing name");
  std::set<std::string> machine_names;
  for (const auto& m : spec.machines) {
    if (m.name.empty()) throw ValidationError("spec: machine with empty name");
    if (m.name == kRobotMachine)
      throw ValidationError("spec: machine name 'robot' is reserved");
    if (!machine_names.insert(m.name).second)
      throw ValidationError("spec: duplicate machine name " + m.name);
    if (m.instance_type == kAuto && m.backend != BackendKind::kLocalProcess &&
        !m.requirements)
      throw ValidationError("spec: machine " + m.name +
                            " has instance_type auto but no requirements");
    if (m.requirements) {
      const auto& r = *m.requirements;
      if (r.cpu_cores < 1) throw ValidationError("spec: cpu_cores must be >= 1");
      if (r.memory_mib < 0 || r.gpu_units < 0)
        throw ValidationError("spec: negative resource requirement");
    }
  }
  std::set<std::string> node_names;
  for (const auto& n : spec.nodes) {
    if (n.name.empty()) throw ValidationError("spec: node with empty name");
    if (!node_names.insert(n.name).second)
      throw ValidationError("spec: duplicate node name " + n.name);
    if (!builtin_behaviors().count(n.behavior))
      throw ValidationError("spec: node " + n.name + " has unknown behavior " + n.behavior);
    if (n.behavior == "custom-executable" && !n.params.count("path"))
      throw ValidationError("spec: node " + n.name + " needs a path parameter");
    if (n.machine != kRobotMachine && !machine_names.count(n.machine))
      throw ValidationError("spec: node " + n.name + " references undeclared machine " +
                            n.machine);
    std::set<std::string> endpoints(n.publishes.begin(), n.publishes.end());
    endpoints.insert(n.subscribes.begin(), n.subscribes.end());
    for (const auto& [from, to] : n.remaps)
      if (!endpoints.count(from))
        throw ValidationError("spec: node " + n.name + " remaps unused topic " + from);
  }
  std::set<std::string> directive_topics;
  for (const auto& d : spec.compression)
    if (!directive_topics.insert(d.topic).second)
      throw ValidationError("spec: duplicate compression directive for " + d.topic);
}

// --- document format ----------------------------------------------------------

namespace detail {

inline void reject_unknown_keys(const Json& obj, const std::set<std::string>& allowed,
                                const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it)
    if (!allowed.count(it.key()))
      throw ParseError("unknown key '" + it.key() + "' in " + where, 0, it.key());
}

inline std::string scalar_to_string(const Json& v, const std::string& where) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  if (v.is_number_float()) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", v.get<double>());
    return buf;
  }
  throw ParseError("expected scalar value in " + where, 0, where);
}

}  // namespace detail

inline NodeSpec node_spec_from_json(const Json& jn) {
  detail::reject_unknown_keys(
      jn, {"name", "behavior", "params", "machine", "publishes", "subscribes", "remaps"},
      "node");
  NodeSpec n;
  n.name = jn.value("name", "");
  n.behavior = jn.value("behavior", "");
  n.machine = jn.value("machine", kRobotMachine);
  const Json jparams = jn.value("params", Json::object());
  for (const auto& [k, v] : jparams.items())
    n.params[k] = detail::scalar_to_string(v, "params." + k);
  for (const Json& t : jn.value("publishes", Json::array()))
    n.publishes.push_back(t.get<std::string>());
  for (const Json& t : jn.value("subscribes", Json::array()))
    n.subscribes.push_back(t.get<std::string>());
  const Json jremaps = jn.value("remaps", Json::object());
  for (const auto& [k, v] : jremaps.items())
    n.remaps[k] = v.get<std::string>();
  return n;
}

inline Json node_spec_to_json(const NodeSpec& n) {
  Json jn;
  jn["name"] = n.name;
  jn["behavior"] = n.behavior;
  if (!n.params.empty()) jn["params"] = n.params;
  jn["machine"] = n.machine;
  jn["publishes"] = n.publishes;
  jn["subscribes"] = n.subscribes;
  if (!n.remaps.empty()) jn["remaps"] = n.remaps;
  return jn;
}

inline LaunchSpec parse_launch_spec(const std::string& text) {
  Json doc;
  try {
    doc = Json::parse(text);
  } catch (const Json::parse_error& e) {
    // nlohmann reports a byte offset; convert to a line number.
    std::size_t line = 1;
    for (std::size_t i = 0; i < std::min<std::size_t>(e.byte, text.size()); ++i)
      if (text[i] == '\n') ++line;
    throw ParseError(std::string("spec syntax error: ") + e.what(), line);
  }
  if (!doc.is_object()) throw ParseError("spec document must be an object");
  detail::reject_unknown_keys(
      doc, {"name", "machines", "nodes", "compression", "monitor"}, "spec");

  LaunchSpec spec;
  try {
    spec.name = doc.at("name").get<std::string>();
  } catch (const Json::exception&) {
    throw ParseError("spec: missing or non-string 'name'", 0, "name");
  }

  for (const Json& jm : doc.value("machines", Json::array())) {
    if (!jm.is_object()) throw ParseError("machine entry must be an object", 0, "machines");
    detail::reject_unknown_keys(
        jm, {"name", "backend", "region", "instance_type", "requirements", "image"},
        "machine");
    MachineSpec m;
    m.name = jm.value("name", "");
    m.backend = backend_from_name(jm.value("backend", "mock-cloud"));
    m.region = jm.value("region", kAuto);
    if (jm.contains("instance_type")) {
      if (jm["instance_type"].is_string())
        m.instance_type = jm["instance_type"].get<std::string>();
      else
        throw ParseError("instance_type must be a type-id string or \"auto\"", 0,
                         "instance_type");
    }
    if (jm.contains("requirements")) {
      const Json& jr = jm["requirements"];
      detail::reject_unknown_keys(jr, {"cpu_cores", "memory_mib", "gpu_units"},
                                  "requirements");
      ResourceSpec r;
      r.cpu_cores = jr.value("cpu_cores", 1);
      r.memory_mib = jr.value("memory_mib", 0L);
      r.gpu_units = jr.value("gpu_units", 0);
      m.requirements = r;
    }
    m.image = jm.value("image", kAuto);
    spec.machines.push_back(std::move(m));
  }

  for (const Json& jn : doc.value("nodes", Json::array())) {
    if (!jn.is_object()) throw ParseError("node entry must be an object", 0, "nodes");
    spec.nodes.push_back(node_spec_from_json(jn));
  }

  for (const Json& jc : doc.value("compression", Json::array())) {
    detail::reject_unknown_keys(jc, {"topic", "mode"}, "compression");
    CompressionDirective d;
    d.topic = jc.value("topic", "");
    if (d.topic.empty()) throw ParseError("compression directive missing topic", 0, "topic");
    d.mode = codec_mode_from_name(jc.value("mode", "streaming"));
    spec.compression.push_back(std::move(d));
  }

  if (doc.contains("monitor")) {
    const Json& jmon = doc["monitor"];
    detail::reject_unknown_keys(jmon, {"port", "topics"}, "monitor");
    MonitorSpec mon;
    mon.port = jmon.value("port", 8765);
    for (const Json& t : jmon.value("topics", Json::array()))
      mon.topics.push_back(t.get<std::string>());
    spec.monitor = std::move(mon);
  }

  validate_launch_spec(spec);
  return spec;
}

inline Json launch_spec_to_json(const LaunchSpec& spec) {
  Json doc;
  doc["name"] = spec.name;
  doc["machines"] = Json::array();
  for (const auto& m : spec.machines) {
    Json jm;
    jm["name"] = m.name;
    jm["backend"] = backend_name(m.backend);
    jm["region"] = m.region;
    jm["instance_type"] = m.instance_type;
    if (m.requirements) {
      jm["requirements"] = {{"cpu_cores", m.requirements->cpu_cores},
                            {"memory_mib", m.requirements->memory_mib},
                            {"gpu_units", m.requirements->gpu_units}};
    }
    jm["image"] = m.image;
    doc["machines"].push_back(std::move(jm));
  }
  doc["nodes"] = Json::array();
  for (const auto& n : spec.nodes) doc["nodes"].push_back(node_spec_to_json(n));
  if (!spec.compression.empty()) {
    doc["compression"] = Json::array();
    for (const auto& d : spec.compression)
      doc["compression"].push_back(
          {{"topic", d.topic}, {"mode", codec_mode_name(d.mode)}});
  }
  if (spec.monitor) {
    doc["monitor"] = {{"port", spec.monitor->port}, {"topics", spec.monitor->topics}};
  }
  return doc;
}

// --- resolvers ------------------------------------------------------------------

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  std::size_t n = v.size();
  return n % 2 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2.0;
}

// Region with the minimal median RTT; ties go to the lexicographically
// smallest region-id.
inline std::string resolve_region(const std::map<std::string, std::vector<double>>& probes) {
  if (probes.empty()) throw ValidationError("resolve_region: no probe results");
  std::string best;
  double best_median = 0;
  for (const auto& [region, samples] : probes) {
    if (samples.empty())
      throw ValidationError("resolve_region: region " + region + " has no samples");
    double m = median(samples);
    if (best.empty() || m < best_median) {
      best = region;
      best_median = m;
    }
  }
  return best;
}

struct InstanceType {
  std::string type_id;
  int cpu_cores = 0;
  long memory_mib = 0;
  int gpu_units = 0;
  double hourly_price = 0;
};

// Cheapest satisfying entry; price ties broken by fewest cores, then
// lexicographic type-id.
inline InstanceType select_instance_type(const ResourceSpec& req,
                                         const std::vector<InstanceType>& catalog) {
  if (catalog.empty()) throw ValidationError("select_instance_type: empty catalog");
  const InstanceType* best = nullptr;
  int fail_cpu = 0, fail_mem = 0, fail_gpu = 0;
  for (const auto& it : catalog) {
    if (it.hourly_price <= 0)
      throw ValidationError("select_instance_type: non-positive price for " + it.type_id);
    bool ok = true;
    if (it.cpu_cores < req.cpu_cores) { ++fail_cpu; ok = false; }
    if (it.memory_mib < req.memory_mib) { ++fail_mem; ok = false; }
    if (it.gpu_units < req.gpu_units) { ++fail_gpu; ok = false; }
    if (!ok) continue;
    if (!best || it.hourly_price < best->hourly_price ||
        (it.hourly_price == best->hourly_price &&
         (it.cpu_cores < best->cpu_cores ||
          (it.cpu_cores == best->cpu_cores && it.type_id < best->type_id))))
      best = &it;
  }
  if (!best) {
    std::string dim = "cpu_cores";
    int worst = fail_cpu;
    if (fail_mem > worst) { dim = "memory"; worst = fail_mem; }
    if (fail_gpu > worst) { dim = "gpu_units"; worst = fail_gpu; }
    throw UnsatisfiableError("select_instance_type: no catalog entry satisfies requirements",
                             dim);
  }
  return *best;
}

struct ImageInfo {
  std::string image_id;
  std::string backend;  // backend_name() string
  std::string region;
  std::set<std::string> tags;
  std::uint64_t created_at = 0;
};

// AUTO: newest image matching backend+region (and the gpu tag when needed),
// else the reserved "default" (full install). Explicit ids must exist.
inline std::string resolve_image(const std::string& requested, BackendKind backend,
                                 const std::string& region, bool needs_gpu,
                                 const std::vector<ImageInfo>& registry) {
  if (requested != kAuto) {
    if (requested == kDefaultImage) return requested;
    for (const auto& img : registry)
      if (img.image_id == requested) return requested;
    throw NotFoundError("resolve_image: image " + requested + " not in registry");
  }
  const ImageInfo* best = nullptr;
  for (const auto& img : registry) {
    if (img.backend != backend_name(backend) || img.region != region) continue;
    if (needs_gpu && !img.tags.count("gpu")) continue;
    if (!best || img.created_at > best->created_at ||
        (img.created_at == best->created_at && img.image_id < best->image_id))
      best = &img;
  }
  return best ? best->image_id : kDefaultImage;
}

// --- compression insertion -------------------------------------------------------

inline std::string topic_node_stem(const std::string& topic) {
  std::string s;
  for (char c : topic) {
    if (c == '/') {
      if (!s.empty()) s += '_';
    } else {
      s += c;
    }
  }
  return s;
}

struct InsertionReport {
  std::vector<std::string> warnings;
};

// Fig-3 style transform: robot publisher of T is remapped to T/src, an
// encoder on the robot bridges T/src to T/enc, and a decoder on each
// subscribing cloud machine turns T/enc back into a locally published T.
// Directives without a robot-publisher/cloud-subscriber edge are dropped
// with a warning. Idempotent.
inline LaunchSpec insert_compression_nodes(const LaunchSpec& input,
                                           InsertionReport* report = nullptr) {
  LaunchSpec spec = input;
  std::vector<CompressionDirective> kept;
  for (const auto& d : spec.compression) {
    bool already = false;
    for (const auto& n : spec.nodes) {
      auto it = n.params.find("topic");
      if (n.behavior == "encoder" && it != n.params.end() && it->second == d.topic)
        already = true;
    }
    if (already) {
      kept.push_back(d);
      continue;
    }
    std::vector<NodeSpec*> robot_pubs;
    std::set<std::string> cloud_sub_machines;
    for (auto& n : spec.nodes) {
      for (const auto& t : n.publishes)
        if (n.effective(t) == d.topic && n.machine == kRobotMachine)
          robot_pubs.push_back(&n);
      for (const auto& t : n.subscribes)
        if (n.effective(t) == d.topic && n.machine != kRobotMachine)
          cloud_sub_machines.insert(n.machine);
    }
    if (robot_pubs.empty() || cloud_sub_machines.empty()) {
      if (report)
        report->warnings.push_back("compression directive on " + d.topic +
                                   " has no robot-to-cloud edge; dropped");
      continue;
    }
    kept.push_back(d);
    for (NodeSpec* p : robot_pubs) {
      for (const auto& t : p->publishes)
        if (p->effective(t) == d.topic) p->remaps[t] = d.topic + "/src";
    }
    std::string stem = topic_node_stem(d.topic);
    NodeSpec enc;
    enc.name = stem + "_encoder";
    enc.behavior = "encoder";
    enc.machine = kRobotMachine;
    enc.subscribes = {d.topic + "/src"};
    enc.publishes = {d.topic + "/enc"};
    enc.params["topic"] = d.topic;
    enc.params["mode"] = codec_mode_name(d.mode);
    spec.nodes.push_back(std::move(enc));
    for (const auto& m : cloud_sub_machines) {
      NodeSpec dec;
      dec.name = stem + "_decoder_" + m;
      dec.behavior = "decoder";
      dec.machine = m;
      dec.subscribes = {d.topic + "/enc"};
      dec.publishes = {d.topic};
      dec.params["topic"] = d.topic;
      dec.params["mode"] = codec_mode_name(d.mode);
      spec.nodes.push_back(std::move(dec));
    }
  }
  spec.compression = std::move(kept);
  validate_launch_spec(spec);
  return spec;
}

// --- planning ---------------------------------------------------------------------

enum class PlanStepKind {
  kResolve,
  kProvision,
  kInstall,
  kTunnelSetup,
  kWorkspaceCopy,
  kPeerConfig,
  kCompressionInsert,
  kMonitorStart,
  kLaunchCloudNodes,
  kLaunchRobotNodes,
};

inline std::string plan_step_name(PlanStepKind k) {
  switch (k) {
    case PlanStepKind::kResolve: return "resolve";
    case PlanStepKind::kProvision: return "provision";
    case PlanStepKind::kInstall: return "install";
    case PlanStepKind::kTunnelSetup: return "tunnel-setup";
    case PlanStepKind::kWorkspaceCopy: return "workspace-copy";
    case PlanStepKind::kPeerConfig: return "peer-config";
    case PlanStepKind::kCompressionInsert: return "compression-insert";
    case PlanStepKind::kMonitorStart: return "monitor-start";
    case PlanStepKind::kLaunchCloudNodes: return "launch-cloud-nodes";
    case PlanStepKind::kLaunchRobotNodes: return "launch-robot-nodes";
  }
  return "?";
}

struct PlanStep {
  PlanStepKind kind;
  std::string machine;  // empty for global steps
  std::string detail;
};

struct ResolvedMachine {
  std::string name;
  BackendKind backend = BackendKind::kMockCloud;
  std::string region;
  InstanceType instance;
  std::string image;
};

struct Resolutions {
  std::map<std::string, std::string> regions;
  std::map<std::string, InstanceType> instances;
  std::map<std::string, std::string> images;
};

struct DeploymentPlan {
  LaunchSpec spec;  // post compression-insert
  std::vector<PlanStep> steps;
  std::vector<ResolvedMachine> machines;

  std::vector<const NodeSpec*> nodes_on(const std::string& machine) const {
    std::vector<const NodeSpec*> out;
    for (const auto& n : spec.nodes)
      if (n.machine == machine) out.push_back(&n);
    return out;
  }
};

inline DeploymentPlan plan_deployment(const LaunchSpec& validated_spec,
                                      const Resolutions& res,
                                      InsertionReport* report = nullptr) {
  validate_launch_spec(validated_spec);
  DeploymentPlan plan;
  plan.spec = insert_compression_nodes(validated_spec, report);

  for (const auto& m : plan.spec.machines) {
    ResolvedMachine rm;
    rm.name = m.name;
    rm.backend = m.backend;
    rm.region = m.region;
    if (rm.region == kAuto) {
      auto it = res.regions.find(m.name);
      if (it == res.regions.end())
        throw ValidationError("plan: unresolved region for machine " + m.name);
      rm.region = it->second;
    }
    auto ii = res.instances.find(m.name);
    if (ii != res.instances.end()) {
      rm.instance = ii->second;
    } else if (m.instance_type != kAuto) {
      rm.instance.type_id = m.instance_type;
    } else {
      throw ValidationError("plan: unresolved instance type for machine " + m.name);
    }
    rm.image = m.image;
    if (rm.image == kAuto) {
      auto it = res.images.find(m.name);
      if (it == res.images.end())
        throw ValidationError("plan: unresolved image for machine " + m.name);
      rm.image = it->second;
    }
    plan.machines.push_back(std::move(rm));
  }

  for (const auto& rm : plan.machines) {
    plan.steps.push_back({PlanStepKind::kResolve, rm.name,
                          rm.region + " " + rm.instance.type_id + " " + rm.image});
    plan.steps.push_back({PlanStepKind::kProvision, rm.name, rm.instance.type_id});
    // Warm-pool machines come preinstalled (the pool paid for install when it
    // was configured), so they boot straight to ready.
    if (rm.image == kDefaultImage && rm.backend != BackendKind::kWarmPool)
      plan.steps.push_back({PlanStepKind::kInstall, rm.name, "full install"});
    plan.steps.push_back({PlanStepKind::kTunnelSetup, rm.name, ""});
    plan.steps.push_back({PlanStepKind::kWorkspaceCopy, rm.name, ""});
    plan.steps.push_back({PlanStepKind::kPeerConfig, rm.name, ""});
  }
  if (!plan.spec.compression.empty())
    plan.steps.push_back({PlanStepKind::kCompressionInsert, "", "applied at plan time"});
  if (plan.spec.monitor)
    plan.steps.push_back({PlanStepKind::kMonitorStart, "",
                          "port " + std::to_string(plan.spec.monitor->port)});
  if (!plan.machines.empty())
    plan.steps.push_back({PlanStepKind::kLaunchCloudNodes, "", ""});
  plan.steps.push_back({PlanStepKind::kLaunchRobotNodes, "", ""});
  return plan;
}

}  // namespace fogmesh
