#pragma once

// The fog command-line tool: launch, inspect, connect to and delete
// deployments; manage images; run benchmark suites. One process per
// invocation; shared state lives in the state directory.

#include <unistd.h>

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fogmesh/agent.hpp"
#include "fogmesh/bench.hpp"
#include "fogmesh/orchestrator.hpp"

namespace fogmesh {

struct CliConfig {
  std::filesystem::path state_dir;
  std::string default_backend = "mock-cloud";
  double scale = 1.0;
  std::uint64_t seed = 0;
  std::string format = "table";  // table | json
};

namespace cli_detail {

inline std::filesystem::path default_state_dir() {
  if (const char* env = std::getenv("FOG_STATE_DIR"); env && *env) return env;
  if (const char* home = std::getenv("HOME"); home && *home)
    return std::filesystem::path(home) / ".fogmesh";
  return ".fogmesh";
}

inline std::filesystem::path self_exe() {
  std::error_code ec;
  auto p = std::filesystem::read_symlink("/proc/self/exe", ec);
  return ec ? std::filesystem::path{} : p;
}

inline std::string human_age(std::uint64_t created_wall_us) {
  auto now = static_cast<std::uint64_t>(
      std::chrono::duration_cast<std::chrono::microseconds>(
          std::chrono::system_clock::now().time_since_epoch())
          .count());
  if (now < created_wall_us) return "0s";
  std::uint64_t s = (now - created_wall_us) / 1'000'000;
  char buf[32];
  if (s < 120) std::snprintf(buf, sizeof buf, "%llus", (unsigned long long)s);
  else if (s < 7200) std::snprintf(buf, sizeof buf, "%llum", (unsigned long long)(s / 60));
  else std::snprintf(buf, sizeof buf, "%lluh", (unsigned long long)(s / 3600));
  return buf;
}

// Fixed-width table writer: widths from content, two-space gutters.
inline void print_table(std::ostream& out, const std::vector<std::vector<std::string>>& rows) {
  if (rows.empty()) return;
  std::vector<std::size_t> w;
  for (const auto& r : rows) {
    if (w.size() < r.size()) w.resize(r.size());
    for (std::size_t i = 0; i < r.size(); ++i) w[i] = std::max(w[i], r[i].size());
  }
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size(); ++i) {
      out << r[i];
      if (i + 1 < r.size()) out << std::string(w[i] - r[i].size() + 2, ' ');
    }
    out << "\n";
  }
}

inline volatile std::sig_atomic_t& wait_stop_flag() {
  static volatile std::sig_atomic_t flag = 0;
  return flag;
}

}  // namespace cli_detail

// Runs one CLI invocation. Streams are injectable so tests can drive the
// whole surface in-process; exit codes: 0 success, 1 runtime failure, 2
// usage or spec error.
inline int run_cli(std::vector<std::string> argv, std::istream& in = std::cin,
                   std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  crypto_init();
  CLI::App app{"fog: offload robot computation to elastically provisioned machines"};
  app.require_subcommand(1);

  CliConfig cfg;
  cfg.state_dir = cli_detail::default_state_dir();
  app.add_option("--state-dir", cfg.state_dir, "State directory (env FOG_STATE_DIR)")
      ->envname("FOG_STATE_DIR");
  app.add_option("--scale", cfg.scale, "Scale factor for simulated provision delays")
      ->check(CLI::PositiveNumber);
  app.add_option("--seed", cfg.seed, "Deterministic seed (0 randomizes identities)");
  app.add_option("--format", cfg.format, "Output format")
      ->check(CLI::IsMember({"table", "json"}));
  app.add_option("--backend", cfg.default_backend, "Default backend for image commands")
      ->check(CLI::IsMember({"mock-cloud", "local-process", "warm-pool"}));

  // launch
  auto* launch = app.add_subcommand("launch", "Deploy a launch spec");
  std::string spec_path;
  bool dry_run = false, wait = false;
  launch->add_option("--spec", spec_path, "Launch spec document")->required();
  launch->add_flag("--dry-run", dry_run, "Resolve and plan without provisioning");
  launch->add_flag("--wait", wait,
                   "Keep robot-side nodes (and the monitor bridge) running until interrupted");

  // list
  auto* list = app.add_subcommand("list", "List deployments and their machines");

  // delete
  auto* del = app.add_subcommand("delete", "Tear down deployments");
  std::string del_id;
  bool del_all = false;
  del->add_option("deployment", del_id, "Deployment id");
  del->add_flag("--all", del_all, "Tear down every non-deleted deployment");

  // connect
  auto* connect = app.add_subcommand("connect", "Run commands on a deployed machine");
  std::string conn_id, conn_machine, conn_cmd;
  connect->add_option("deployment", conn_id, "Deployment id")->required();
  connect->add_option("machine", conn_machine, "Machine name")->required();
  connect->add_option("--cmd", conn_cmd, "Run one command instead of an interactive session");

  // image
  auto* image = app.add_subcommand("image", "Manage machine images");
  image->require_subcommand(1);
  auto* img_create = image->add_subcommand("create", "Build an image from a base");
  std::string img_region, img_base = std::string(kDefaultImage);
  std::vector<std::string> img_tags;
  img_create->add_option("--region", img_region, "Region to build in (default: first region)");
  img_create->add_option("--base", img_base, "Base image id");
  img_create->add_option("--tag", img_tags, "Tags, e.g. gpu");
  auto* img_list = image->add_subcommand("list", "List images");
  auto* img_delete = image->add_subcommand("delete", "Delete an unused image");
  std::string img_id;
  img_delete->add_option("image", img_id, "Image id")->required();

  // bench
  auto* bench = app.add_subcommand("bench", "Run a benchmark suite");
  std::string suite, report_path, bench_format;
  std::uint64_t bench_seed = 1;
  int bench_frames = 3000, bench_reps = 5;
  std::string region_profile = "west";
  bench->add_option("suite", suite, "video | offload | startup | region");
  bench->add_option("--report", report_path, "Write the report to this file");
  bench->add_option("--seed", bench_seed, "Suite seed");
  bench->add_option("--bench-format", bench_format, "markdown | csv | machine")
      ->check(CLI::IsMember({"markdown", "csv", "machine"}));
  bench->add_option("--frames", bench_frames, "Video suite: frames to publish");
  bench->add_option("--reps", bench_reps, "Startup suite: repetitions per cell");
  bench->add_option("--profile", region_profile, "Region suite: robot position profile");

  // agent (hidden): re-exec target for spawned machine agents
  auto* agent = app.add_subcommand("agent");
  agent->group("");  // hide from help
  std::string agent_workdir;
  agent->add_option("--workdir", agent_workdir, "Agent working directory")->required();

  try {
    std::vector<const char*> cargv;
    cargv.push_back("fog");
    for (const auto& a : argv) cargv.push_back(a.c_str());
    app.parse(static_cast<int>(cargv.size()), cargv.data());
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "fog: " << e.what() << "\n";
    return 2;
  }

  bool json_mode = cfg.format == "json";
  try {
    if (*agent) return run_agent_process(agent_workdir);

    StateDir state(cfg.state_dir);
    auto orch = [&]() {
      Orchestrator::Options opt;
      opt.scale = cfg.scale;
      opt.seed = cfg.seed;
      opt.agent_exe = cli_detail::self_exe();
      if (!json_mode) opt.progress = [&err](const std::string& s) { err << "  " << s << "\n"; };
      return std::make_unique<Orchestrator>(state, opt);
    };

    if (*launch) {
      std::ifstream f(spec_path);
      if (!f) throw Error("cannot read spec " + spec_path);
      std::stringstream buf;
      buf << f.rdbuf();
      LaunchSpec ls = parse_launch_spec(buf.str());

      if (dry_run) {
        auto o = orch();
        auto dr = o->dry_run(ls);
        if (json_mode) {
          Json doc;
          doc["machines"] = Json::object();
          for (const auto& m : dr.plan.machines)
            doc["machines"][m.name] = {{"backend", backend_name(m.backend)},
                                       {"region", m.region},
                                       {"instance_type", m.instance.type_id},
                                       {"image", m.image}};
          doc["steps"] = Json::array();
          for (const auto& s : dr.plan.steps)
            doc["steps"].push_back(
                {{"step", plan_step_name(s.kind)}, {"machine", s.machine}, {"detail", s.detail}});
          doc["warnings"] = dr.warnings;
          out << doc.dump(2) << "\n";
        } else {
          for (const auto& w : dr.warnings) err << "warning: " << w << "\n";
          std::vector<std::vector<std::string>> rows{
              {"MACHINE", "BACKEND", "REGION", "INSTANCE", "IMAGE"}};
          for (const auto& m : dr.plan.machines)
            rows.push_back({m.name, backend_name(m.backend), m.region, m.instance.type_id,
                            m.image});
          cli_detail::print_table(out, rows);
          out << "\nplan:\n";
          for (const auto& s : dr.plan.steps)
            out << "  " << plan_step_name(s.kind) << (s.machine.empty() ? "" : " " + s.machine)
                << (s.detail.empty() ? "" : "  (" + s.detail + ")") << "\n";
        }
        return 0;
      }

      auto o = orch();
      if (wait && ls.monitor) {
        // Re-create with the monitor bridge armed; same state directory.
        Orchestrator::Options opt;
        opt.scale = cfg.scale;
        opt.seed = cfg.seed;
        opt.agent_exe = cli_detail::self_exe();
        opt.start_monitor = true;
        if (!json_mode) opt.progress = [&err](const std::string& s) { err << "  " << s << "\n"; };
        o = std::make_unique<Orchestrator>(state, opt);
      }
      DeploymentRecord rec = o->execute(ls);
      if (json_mode)
        out << deployment_record_to_json(rec).dump(2) << "\n";
      else
        out << rec.deployment_id << "\n";
      if (rec.status != "running") {
        err << "launch ended " << rec.status
            << (rec.failed_step.empty() ? "" : " at " + rec.failed_step) << "\n";
        return 1;
      }
      if (wait) {
        cli_detail::wait_stop_flag() = 0;
        std::signal(SIGINT, [](int) { cli_detail::wait_stop_flag() = 1; });
        std::signal(SIGTERM, [](int) { cli_detail::wait_stop_flag() = 1; });
        err << "running; robot nodes stay up until interrupted\n";
        while (!cli_detail::wait_stop_flag()) ::usleep(100'000);
      }
      return 0;
    }

    if (*list) {
      auto o = orch();
      if (json_mode) {
        out << o->list_json().dump(2) << "\n";
        return 0;
      }
      auto recs = o->list();
      std::vector<std::vector<std::string>> rows{
          {"DEPLOYMENT", "STATUS", "AGE", "MACHINE", "BACKEND", "REGION", "INSTANCE", "STATE"}};
      for (const auto& r : recs) {
        if (r.machines.empty())
          rows.push_back({r.deployment_id, r.status, cli_detail::human_age(r.created_at), "-",
                          "-", "-", "-", "-"});
        for (const auto& m : r.machines) {
          std::string st = "-";
          if (!m.machine_id.empty()) {
            try {
              st = machine_state_name(
                  o->provider(m.backend).lookup(m.machine_id).state);
            } catch (const NotFoundError&) {
              st = "absent";
            }
          }
          rows.push_back({r.deployment_id, r.status, cli_detail::human_age(r.created_at),
                          m.name, backend_name(m.backend), m.region, m.instance_type, st});
        }
      }
      cli_detail::print_table(out, rows);
      return 0;
    }

    if (*del) {
      if (del_id.empty() && !del_all) {
        err << "fog delete: give a deployment id or --all\n";
        return 2;
      }
      auto o = orch();
      if (del_all) {
        for (const auto& r : o->list())
          if (r.status != "deleted") {
            o->teardown(r.deployment_id);
            out << r.deployment_id << " deleted\n";
          }
        return 0;
      }
      o->teardown(del_id);
      out << del_id << " deleted\n";
      return 0;
    }

    if (*connect) {
      auto o = orch();
      if (!conn_cmd.empty()) {
        Json r = o->attach_exec(conn_id, conn_machine, conn_cmd);
        out << r.value("output", "");
        return r.value("exit_code", -1) == 0 ? 0 : 1;
      }
      err << "connected to " << conn_machine << "; EOF detaches\n";
      std::string line;
      while (out << conn_machine << "$ " << std::flush, std::getline(in, line)) {
        if (line.empty()) continue;
        Json r = o->attach_exec(conn_id, conn_machine, line);
        out << r.value("output", "");
        if (r.value("exit_code", 0) != 0) out << "(exit " << r.value("exit_code", 0) << ")\n";
      }
      out << "\ndetached\n";
      return 0;
    }

    if (*image) {
      BackendKind kind = backend_from_name(cfg.default_backend);
      BackendConfig bc = default_backend_config(kind);
      bc.delays.scale = cfg.scale;
      BuiltinProvider prov(state, kind, bc);
      if (*img_create) {
        std::string region = img_region.empty() ? bc.regions.front().region_id : img_region;
        std::set<std::string> tags(img_tags.begin(), img_tags.end());
        ImageRecord r = prov.build_image(region, img_base, tags);
        if (json_mode)
          out << Json{{"image_id", r.image_id},
                      {"backend", r.backend},
                      {"region", r.region},
                      {"preinstalled", r.preinstalled}}
                     .dump(2)
              << "\n";
        else
          out << r.image_id << "\n";
        return 0;
      }
      if (*img_list) {
        auto imgs = prov.images();
        if (json_mode) {
          Json doc = Json::array();
          for (const auto& r : imgs)
            doc.push_back({{"image_id", r.image_id},
                           {"backend", r.backend},
                           {"region", r.region},
                           {"tags", r.tags},
                           {"preinstalled", r.preinstalled}});
          out << doc.dump(2) << "\n";
          return 0;
        }
        std::vector<std::vector<std::string>> rows{
            {"IMAGE", "BACKEND", "REGION", "PREINSTALLED", "TAGS"}};
        for (const auto& r : imgs) {
          std::string tags;
          for (const auto& t : r.tags) tags += (tags.empty() ? "" : ",") + t;
          rows.push_back(
              {r.image_id, r.backend, r.region, r.preinstalled ? "true" : "false", tags});
        }
        cli_detail::print_table(out, rows);
        return 0;
      }
      if (*img_delete) {
        auto o = orch();
        for (const auto& rec : o->list()) {
          if (rec.status == "deleted") continue;
          for (const auto& m : rec.machines)
            if (m.image == img_id)
              throw Error("image " + img_id + " is in use by deployment " + rec.deployment_id);
        }
        prov.delete_image(img_id);
        out << img_id << " deleted\n";
        return 0;
      }
    }

    if (*bench) {
      BenchReport rep;
      if (suite == "video") {
        VideoBenchConfig vc;
        vc.seed = bench_seed;
        vc.frames = bench_frames;
        rep = run_video_bench(vc);
      } else if (suite == "offload") {
        rep = run_offload_bench(bench_seed);
      } else if (suite == "startup") {
        StartupBenchConfig sc;
        sc.seed = bench_seed;
        sc.scale = cfg.scale;
        sc.reps = bench_reps;
        rep = run_startup_bench(sc, cfg.state_dir / "bench");
      } else if (suite == "region") {
        RegionBenchConfig rc;
        rc.seed = bench_seed;
        rc.profile = region_profile;
        rep = run_region_bench(rc, cfg.state_dir / "bench");
      } else {
        err << "fog bench: unknown suite '" << suite
            << "' (expected video, offload, startup or region)\n";
        return 2;
      }
      std::string fmt = bench_format.empty() ? (json_mode ? "machine" : "markdown")
                                             : bench_format;
      std::string text = emit_report(rep, fmt);
      if (report_path.empty()) {
        out << text;
      } else {
        std::ofstream f(report_path, std::ios::trunc);
        if (!f) throw Error("cannot write report " + report_path);
        f << text;
        out << report_path << "\n";
      }
      return 0;
    }
  } catch (const ValidationError& e) {
    err << "fog: " << e.what() << "\n";
    return 2;
  } catch (const ParseError& e) {
    err << "fog: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "fog: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace fogmesh
