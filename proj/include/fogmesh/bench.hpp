#pragma once

// Benchmark suites over the deterministic simulation: frame delivery under a
// shaped link, compute-offload round trips, provision latency, region
// probing. Everything runs on virtual clocks, so a given seed and config
// always produce byte-identical machine-readable reports.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fogmesh/behaviors.hpp"
#include "fogmesh/launch.hpp"
#include "fogmesh/provision.hpp"
#include "fogmesh/simworld.hpp"
#include "fogmesh/statedir.hpp"

namespace fogmesh {

// --- report -----------------------------------------------------------------------

struct BenchRow {
  std::string scenario;
  Json metrics = Json::object();  // keyed by the report's columns
};

struct BenchReport {
  std::string suite;
  Json environment = Json::object();  // seed and effective config, no wall time
  std::vector<std::string> columns;
  std::vector<BenchRow> rows;
};

inline Json bench_report_to_json(const BenchReport& r) {
  Json rows = Json::array();
  for (const auto& row : r.rows) rows.push_back({{"scenario", row.scenario}, {"metrics", row.metrics}});
  return {{"suite", r.suite},
          {"environment", r.environment},
          {"columns", r.columns},
          {"rows", rows}};
}

inline BenchReport bench_report_from_json(const Json& j) {
  BenchReport r;
  r.suite = j.at("suite").get<std::string>();
  r.environment = j.at("environment");
  r.columns = j.at("columns").get<std::vector<std::string>>();
  for (const auto& row : j.at("rows")) {
    BenchRow br;
    br.scenario = row.at("scenario").get<std::string>();
    br.metrics = row.at("metrics");
    r.rows.push_back(std::move(br));
  }
  return r;
}

inline std::string emit_report(const BenchReport& r, const std::string& format) {
  std::ostringstream out;
  auto cell = [&](const BenchRow& row, const std::string& col) -> std::string {
    auto it = row.metrics.find(col);
    return it == row.metrics.end() ? "" : it->dump();
  };
  if (format == "machine" || format == "json") {
    return bench_report_to_json(r).dump(2) + "\n";
  }
  if (format == "csv") {
    out << "scenario";
    for (const auto& c : r.columns) out << "," << c;
    out << "\n";
    for (const auto& row : r.rows) {
      out << row.scenario;
      for (const auto& c : r.columns) out << "," << cell(row, c);
      out << "\n";
    }
    return out.str();
  }
  if (format == "markdown") {
    out << "| scenario |";
    for (const auto& c : r.columns) out << " " << c << " |";
    out << "\n|---|";
    for (std::size_t i = 0; i < r.columns.size(); ++i) out << "---|";
    out << "\n";
    for (const auto& row : r.rows) {
      out << "| " << row.scenario << " |";
      for (const auto& c : r.columns) out << " " << cell(row, c) << " |";
      out << "\n";
    }
    out << "\nEnvironment: `" << r.environment.dump() << "`\n";
    return out.str();
  }
  throw ValidationError("bench: unknown report format " + format +
                        " (expected markdown, csv or machine)");
}

// Rebuilds the tabular part of a report from its csv emission. Suite name and
// environment do not travel through csv.
inline BenchReport parse_report_csv(const std::string& text) {
  BenchReport r;
  std::istringstream in(text);
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string c;
    while (std::getline(ls, c, ',')) cells.push_back(c);
    if (header) {
      r.columns.assign(cells.begin() + 1, cells.end());
      header = false;
      continue;
    }
    BenchRow row;
    row.scenario = cells.at(0);
    for (std::size_t i = 1; i < cells.size(); ++i)
      if (!cells[i].empty()) row.metrics[r.columns.at(i - 1)] = Json::parse(cells[i]);
    r.rows.push_back(std::move(row));
  }
  return r;
}

namespace detail {

inline Json link_to_json(const LinkModel& l) {
  return {{"bandwidth_bps", l.bandwidth_bps},
          {"propagation_delay_ms", l.propagation_delay_ms},
          {"loss_rate", l.loss_rate}};
}

inline double percentile(std::vector<double> v, double p) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  auto idx = static_cast<std::size_t>(std::ceil(p * static_cast<double>(v.size())));
  return v[std::min(v.size() - 1, idx == 0 ? 0 : idx - 1)];
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0 : s / static_cast<double>(v.size());
}

inline double stddev_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0;
  double m = mean_of(v), s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace detail

// --- video suite ------------------------------------------------------------------

struct VideoBenchConfig {
  int frames = 3000;
  int width = 640;
  int height = 480;
  int channels = 3;
  double fps = 30.0;
  int warmup_frames = 30;  // frame indexes below this are excluded from metrics
  double drain_s = 4.0;    // extra run time after the source stops
  LinkModel link{};
  std::uint64_t seed = 1;
  std::vector<CodecMode> modes{CodecMode::kRaw, CodecMode::kPerFrame, CodecMode::kStreaming};
};

struct VideoModeResult {
  std::uint64_t frames_received = 0;
  double fps_received = 0;
  double latency_mean_ms = 0;
  double latency_median_ms = 0;
  double latency_p95_ms = 0;
  std::uint64_t bytes_on_wire = 0;  // link-level send accounting
  std::uint64_t tap_bytes = 0;      // independent post-encryption datagram tap
  std::uint64_t writer_drops = 0;
};

// One camera-to-cloud pipeline under the configured link, in the given
// transport mode, measured at the robot: latency is ack receipt minus frame
// capture on the same virtual clock.
inline VideoModeResult run_video_mode(const VideoBenchConfig& cfg, CodecMode mode) {
  SimWorld world(cfg.seed);
  world.add_machine(kRobotMachine);
  world.add_machine("cloud");
  world.link(kRobotMachine, "cloud", cfg.link);

  LaunchSpec ls;
  ls.name = "video-bench";
  MachineSpec cloud;
  cloud.name = "cloud";
  cloud.backend = BackendKind::kMockCloud;
  cloud.instance_type = "small";
  ls.machines.push_back(cloud);

  NodeSpec cam;
  cam.name = "cam";
  cam.machine = kRobotMachine;
  cam.behavior = "image-source";
  cam.publishes = {"/bench/img"};
  cam.params["width"] = std::to_string(cfg.width);
  cam.params["height"] = std::to_string(cfg.height);
  cam.params["channels"] = std::to_string(cfg.channels);
  cam.params["fps"] = std::to_string(cfg.fps);
  cam.params["frames"] = std::to_string(cfg.frames);
  cam.params["seed"] = std::to_string(cfg.seed);
  ls.nodes.push_back(cam);

  NodeSpec echo;
  echo.name = "echo";
  echo.machine = "cloud";
  echo.behavior = "echo-ack";
  echo.subscribes = {"/bench/img"};
  echo.publishes = {"/bench/ack"};
  ls.nodes.push_back(echo);

  if (mode != CodecMode::kRaw) {
    ls.compression.push_back({"/bench/img", mode});
    ls = insert_compression_nodes(ls);
  } else {
    validate_launch_spec(ls);
  }

  struct Obs {
    Micros at = 0;
    AckBody body;
  };
  std::vector<Obs> acks;
  auto* probe = world.router(kRobotMachine).create_node("bench-probe");
  probe->subscribe("/bench/ack", DeliveryMode::kBestEffort, [&](const Message& m) {
    acks.push_back({world.now(), parse_ack(ByteView(m.payload.data(), m.payload.size()))});
  });
  world.run_for(20'000);  // let the subscription beacon reach the cloud

  auto& robot = world.machine(kRobotMachine);
  auto& cloudm = world.machine("cloud");
  auto wire_before = robot.mesh->link_stats(cloudm.identity.public_key).bytes_on_wire +
                     cloudm.mesh->link_stats(robot.identity.public_key).bytes_on_wire;
  auto tap_before = world.total_wire_bytes();
  auto drops_before = world.router(kRobotMachine).stats().writer_drops;

  world.launch_all(ls);
  auto span = static_cast<Micros>((static_cast<double>(cfg.frames) / cfg.fps + cfg.drain_s) * 1e6);
  world.run_for(span);

  VideoModeResult res;
  res.bytes_on_wire = robot.mesh->link_stats(cloudm.identity.public_key).bytes_on_wire +
                      cloudm.mesh->link_stats(robot.identity.public_key).bytes_on_wire -
                      wire_before;
  res.tap_bytes = world.total_wire_bytes() - tap_before;
  res.writer_drops = world.router(kRobotMachine).stats().writer_drops - drops_before;

  std::vector<Obs> counted;
  for (const auto& o : acks)
    if (o.body.frame_index >= static_cast<std::uint64_t>(cfg.warmup_frames)) counted.push_back(o);
  if (counted.empty())
    throw Error("video bench: no frames survived the " + codec_mode_name(mode) + " run");

  res.frames_received = counted.size();
  if (counted.size() >= 2) {
    double window_s = static_cast<double>(counted.back().at - counted.front().at) / 1e6;
    res.fps_received = static_cast<double>(counted.size() - 1) / window_s;
  } else {
    res.fps_received = 1e6 / static_cast<double>(span);
  }
  std::vector<double> lat;
  lat.reserve(counted.size());
  for (const auto& o : counted)
    lat.push_back(static_cast<double>(o.at - o.body.capture_instant) / 1000.0);
  res.latency_mean_ms = detail::mean_of(lat);
  res.latency_median_ms = median(lat);
  res.latency_p95_ms = detail::percentile(lat, 0.95);
  return res;
}

inline BenchReport run_video_bench(const VideoBenchConfig& cfg) {
  BenchReport rep;
  rep.suite = "video";
  rep.columns = {"fps_received",   "latency_mean_ms", "latency_median_ms",
                 "latency_p95_ms", "bytes_on_wire",   "tap_bytes",
                 "frames_received", "writer_drops"};
  rep.environment = {{"seed", cfg.seed},
                     {"frames", cfg.frames},
                     {"width", cfg.width},
                     {"height", cfg.height},
                     {"channels", cfg.channels},
                     {"fps", cfg.fps},
                     {"warmup_frames", cfg.warmup_frames},
                     {"drain_s", cfg.drain_s},
                     {"link", detail::link_to_json(cfg.link)}};
  for (CodecMode mode : cfg.modes) {
    VideoModeResult r = run_video_mode(cfg, mode);
    BenchRow row;
    row.scenario = codec_mode_name(mode);
    row.metrics = {{"fps_received", r.fps_received},
                   {"latency_mean_ms", r.latency_mean_ms},
                   {"latency_median_ms", r.latency_median_ms},
                   {"latency_p95_ms", r.latency_p95_ms},
                   {"bytes_on_wire", r.bytes_on_wire},
                   {"tap_bytes", r.tap_bytes},
                   {"frames_received", r.frames_received},
                   {"writer_drops", r.writer_drops}};
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

// --- offload suite ----------------------------------------------------------------

struct OffloadScenario {
  std::string name = "offload";
  double compute_units = 157.6;
  double robot_speed = 1.0;
  double cloud_speed = 45.5;
  std::uint32_t request_bytes = 64;
  std::uint32_t response_bytes = 64;
  LinkModel link{10e6, 25.0, 0.0};  // 50 ms round trip by default
};

struct OffloadResult {
  double robot_only_s = 0;
  double cloud_compute_s = 0;
  double network_s = 0;
  double total_s = 0;
  double speedup = 0;
};

// Offload arithmetic against a measured round trip: the request/response pair
// actually crosses the simulated link, compute runs at cloud speed on the
// virtual clock, and the alternative is the same work at robot speed.
inline OffloadResult run_offload_scenario(const OffloadScenario& sc, std::uint64_t seed) {
  SimWorld world(seed);
  world.add_machine(kRobotMachine);
  world.add_machine("cloud");
  world.link(kRobotMachine, "cloud", sc.link);

  NodeSpec compute;
  compute.name = "compute";
  compute.machine = "cloud";
  compute.behavior = "synthetic-compute";
  compute.subscribes = {"/off/req"};
  compute.publishes = {"/off/rsp"};
  {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", sc.cloud_speed);
    compute.params["speed"] = buf;
  }
  world.launch_node(compute);

  bool got = false;
  Micros t_done = 0;
  auto* client = world.router(kRobotMachine).create_node("offload-client");
  client->advertise("/off/req");
  client->subscribe("/off/rsp", DeliveryMode::kBestEffort, [&](const Message& m) {
    if (m.payload.size() >= 8) {
      got = true;
      t_done = world.now();
    }
  });
  world.run_for(2'000'000);  // subscription beacons both ways

  ComputeRequest q;
  q.request_id = 1;
  q.work_units = sc.compute_units;
  q.response_size = sc.response_bytes;
  Bytes req = serialize_compute_request(q);
  if (req.size() < sc.request_bytes) {
    q.padding = static_cast<std::uint32_t>(sc.request_bytes - req.size());
    req = serialize_compute_request(q);
  }
  Micros t0 = world.now();
  client->publish("/off/req", std::move(req));

  auto& ex = world.executor();
  Micros cap = t0 + static_cast<Micros>((sc.compute_units / sc.cloud_speed + 3600.0) * 1e6);
  while (!got) {
    if (!ex.step() || ex.now() > cap)
      throw Error("offload bench: no response for scenario " + sc.name);
  }

  OffloadResult r;
  r.robot_only_s = sc.compute_units / sc.robot_speed;
  r.cloud_compute_s = sc.compute_units / sc.cloud_speed;
  r.total_s = static_cast<double>(t_done - t0) / 1e6;
  r.network_s = r.total_s - r.cloud_compute_s;
  r.speedup = r.robot_only_s / r.total_s;
  return r;
}

inline std::vector<OffloadScenario> default_offload_scenarios() {
  std::vector<OffloadScenario> out;
  OffloadScenario gpu;  // heavy model on a fast accelerator, small payloads
  gpu.name = "remote-gpu";
  out.push_back(gpu);

  OffloadScenario parity;  // same speed next door: offload must cost ~nothing
  parity.name = "local-parity";
  parity.compute_units = 10.0;
  parity.cloud_speed = 1.0;
  parity.link = LinkModel{1e9, 0.0, 0.0};
  out.push_back(parity);

  OffloadScenario bulk;  // shoveling megabytes for cheap compute loses
  bulk.name = "bulk-transfer";
  bulk.compute_units = 1.0;
  bulk.cloud_speed = 1.0;
  bulk.request_bytes = 1'000'000;
  bulk.response_bytes = 1'000'000;
  bulk.link = LinkModel{10e6, 3.05, 0.0};
  out.push_back(bulk);
  return out;
}

inline BenchReport run_offload_bench(std::uint64_t seed,
                                     const std::vector<OffloadScenario>& scenarios =
                                         default_offload_scenarios()) {
  BenchReport rep;
  rep.suite = "offload";
  rep.columns = {"robot_only_s", "cloud_compute_s", "network_s", "total_s", "speedup"};
  Json scen = Json::object();
  for (const auto& sc : scenarios)
    scen[sc.name] = {{"compute_units", sc.compute_units},
                     {"robot_speed", sc.robot_speed},
                     {"cloud_speed", sc.cloud_speed},
                     {"request_bytes", sc.request_bytes},
                     {"response_bytes", sc.response_bytes},
                     {"link", detail::link_to_json(sc.link)}};
  rep.environment = {{"seed", seed}, {"scenarios", scen}};
  for (const auto& sc : scenarios) {
    OffloadResult r = run_offload_scenario(sc, seed);
    BenchRow row;
    row.scenario = sc.name;
    row.metrics = {{"robot_only_s", r.robot_only_s},
                   {"cloud_compute_s", r.cloud_compute_s},
                   {"network_s", r.network_s},
                   {"total_s", r.total_s},
                   {"speedup", r.speedup}};
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

// --- startup suite ----------------------------------------------------------------

struct StartupCell {
  std::string name;
  BackendKind backend = BackendKind::kMockCloud;
  bool custom_image = false;
  bool warm = false;
};

struct StartupBenchConfig {
  int reps = 5;
  double scale = 1.0;
  double jitter = 0.08;  // per-phase uniform fraction
  std::uint64_t seed = 1;
  std::vector<StartupCell> cells{
      {"mock-cloud/default", BackendKind::kMockCloud, false, false},
      {"mock-cloud/custom-image", BackendKind::kMockCloud, true, false},
      {"warm-pool/default", BackendKind::kWarmPool, false, true},
  };
};

// Launch-to-first-message per backend/image cell: a full provision through
// the real provider (with per-phase jitter applied to its delay table) plus
// the handshake and first beacon from the fresh machine back to the robot,
// all on one virtual clock.
inline BenchReport run_startup_bench(const StartupBenchConfig& cfg,
                                     const std::filesystem::path& scratch) {
  BenchReport rep;
  rep.suite = "startup";
  rep.columns = {"mean_s", "stddev_s", "normalized_mean_s", "normalized_stddev_s", "reps"};
  Json cells = Json::array();
  for (const auto& c : cfg.cells) cells.push_back(c.name);
  rep.environment = {{"seed", cfg.seed},
                     {"reps", cfg.reps},
                     {"scale", cfg.scale},
                     {"jitter", cfg.jitter},
                     {"cells", cells}};

  Rng rng(cfg.seed);
  for (const auto& cell : cfg.cells) {
    std::vector<double> seconds;
    for (int rep_i = 0; rep_i < cfg.reps; ++rep_i) {
      SimExecutor ex;
      SimNet net(ex);

      auto dir = scratch / "startup" / (cell.name + "-" + std::to_string(rep_i));
      std::filesystem::remove_all(dir);
      StateDir state(dir);

      BackendConfig bc = default_backend_config(cell.backend);
      bc.delays.scale = cfg.scale;
      bc.delays.boot *= 1.0 + rng.uniform(-cfg.jitter, cfg.jitter);
      bc.delays.install *= 1.0 + rng.uniform(-cfg.jitter, cfg.jitter);
      bc.delays.image_copy *= 1.0 + rng.uniform(-cfg.jitter, cfg.jitter);
      bc.delays.scheduling *= 1.0 + rng.uniform(-cfg.jitter, cfg.jitter);
      BuiltinProvider prov(state, cell.backend, bc, nullptr,
                           [&ex](double s) { ex.run_for(static_cast<Micros>(s * 1e6)); });

      std::string region = bc.regions.front().region_id;
      std::string type = bc.catalog.front().type_id;
      std::string image = kDefaultImage;
      if (cell.custom_image) image = prov.build_image(region, kDefaultImage, {"bench"}).image_id;
      if (cell.warm) prov.warm_pool_configure(1, type, false);

      // The robot end and the machine-to-be, wired over an ideal local net so
      // handshake and beacon cost no virtual time of their own.
      KeyPair rid = generate_keypair(rng.fork_seed());
      KeyPair cid = generate_keypair(rng.fork_seed());
      auto rsock = net.open("robot", 0);
      auto csock = net.open("machine", 0);
      Mesh::Config rmc;
      rmc.identity = rid;
      rmc.index_seed = rng.fork_seed();
      Mesh rmesh(ex, *rsock, rmc);
      Mesh::Config cmc;
      cmc.identity = cid;
      cmc.index_seed = rng.fork_seed();
      Mesh cmesh(ex, *csock, cmc);
      Router::Config rrc;
      rrc.machine_name = kRobotMachine;
      rrc.host_id = 1;
      Router rrouter(ex, rmesh, rrc);
      Router::Config crc;
      crc.machine_name = "machine";
      crc.host_id = 2;
      Router crouter(ex, cmesh, crc);
      rmesh.allow_peer(cid.public_key);
      cmesh.allow_peer(rid.public_key);

      Micros t0 = ex.now();
      prov.create_instance(region, type, image, "bench", Json::object());

      auto before = rrouter.stats().beacons_received;
      Micros cap = ex.now() + 5'000'000;
      bool established = false;
      rmesh.connect(cid.public_key, csock->local_endpoint(),
                    [&](bool ok) { established = ok; });
      while (!established) {
        if (!ex.step() || ex.now() > cap)
          throw Error("startup bench: handshake failed in cell " + cell.name);
      }
      rrouter.add_peer(cid.public_key, 2);  // machine answers the first beacon
      while (rrouter.stats().beacons_received == before) {
        if (!ex.step() || ex.now() > cap)
          throw Error("startup bench: no first message in cell " + cell.name);
      }
      seconds.push_back(static_cast<double>(ex.now() - t0) / 1e6);

      rrouter.stop();
      crouter.stop();
      rmesh.stop();
      cmesh.stop();
    }
    BenchRow row;
    row.scenario = cell.name;
    double m = detail::mean_of(seconds), sd = detail::stddev_of(seconds);
    row.metrics = {{"mean_s", m},
                   {"stddev_s", sd},
                   {"normalized_mean_s", m / cfg.scale},
                   {"normalized_stddev_s", sd / cfg.scale},
                   {"reps", cfg.reps}};
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

// --- region suite -----------------------------------------------------------------

struct RegionBenchConfig {
  std::string profile = "west";  // west | east | single
  int samples = 5;
  std::uint64_t seed = 1;
};

inline std::vector<RegionInfo> region_profile(const std::string& profile) {
  if (profile == "west") return {{"us-west-1", 6.1, 72.0}, {"us-east-2", 74.0, 13.0}};
  if (profile == "east") return {{"us-west-1", 74.0, 13.0}, {"us-east-2", 13.0, 72.0}};
  if (profile == "single") return {{"us-west-1", 6.1, 72.0}};
  throw ValidationError("region bench: unknown profile " + profile);
}

// Probes every region of the profile and reports the resolver's pick.
inline BenchReport run_region_bench(const RegionBenchConfig& cfg,
                                    const std::filesystem::path& scratch) {
  auto dir = scratch / "region";
  std::filesystem::remove_all(dir);
  StateDir state(dir);
  BackendConfig bc = default_backend_config(BackendKind::kMockCloud);
  bc.regions = region_profile(cfg.profile);
  bc.probe_seed = cfg.seed;
  BuiltinProvider prov(state, BackendKind::kMockCloud, bc);

  auto probes = prov.probe_regions(cfg.samples);
  std::string chosen = resolve_region(probes);

  BenchReport rep;
  rep.suite = "region";
  rep.columns = {"rtt_median_ms", "rtt_mean_ms", "rtt_min_ms", "rtt_max_ms", "bandwidth_mbps",
                 "chosen"};
  Json regions = Json::object();
  for (const auto& r : bc.regions)
    regions[r.region_id] = {{"base_rtt_ms", r.base_rtt_ms}, {"bandwidth_mbps", r.bandwidth_mbps}};
  rep.environment = {{"seed", cfg.seed},
                     {"samples", cfg.samples},
                     {"profile", cfg.profile},
                     {"chosen_region", chosen},
                     {"regions", regions}};
  for (const auto& r : bc.regions) {
    const auto& v = probes.at(r.region_id);
    BenchRow row;
    row.scenario = r.region_id;
    row.metrics = {{"rtt_median_ms", median(v)},
                   {"rtt_mean_ms", detail::mean_of(v)},
                   {"rtt_min_ms", *std::min_element(v.begin(), v.end())},
                   {"rtt_max_ms", *std::max_element(v.begin(), v.end())},
                   {"bandwidth_mbps", r.bandwidth_mbps},
                   {"chosen", r.region_id == chosen ? 1 : 0}};
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

}  // namespace fogmesh
