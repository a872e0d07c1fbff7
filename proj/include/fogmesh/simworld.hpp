#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "fogmesh/behaviors.hpp"
#include "fogmesh/executor.hpp"
#include "fogmesh/launch.hpp"
#include "fogmesh/net.hpp"
#include "fogmesh/overlay.hpp"
#include "fogmesh/pubsub.hpp"

namespace fogmesh {

// A whole deployment inside one process on a virtual clock: machines with
// real crypto and routers, links with shaped bandwidth/latency/loss, node
// behaviors, and wire taps. Deterministic for a given seed.
class SimWorld {
 public:
  struct Machine {
    std::string name;
    std::uint16_t host_id = 0;
    KeyPair identity;
    std::unique_ptr<DatagramSocket> socket;
    std::unique_ptr<Mesh> mesh;
    std::unique_ptr<Router> router;
    std::vector<std::unique_ptr<Behavior>> behaviors;
    std::uint64_t wire_bytes_out = 0;  // post-encryption datagram tap
  };

  explicit SimWorld(std::uint64_t seed = 1) : rng_(seed), net_(ex_) {}

  ~SimWorld() {
    for (auto& [name, m] : machines_)
      for (auto it = m->behaviors.rbegin(); it != m->behaviors.rend(); ++it) (*it)->stop();
    for (auto& [name, m] : machines_) m->router->stop();
  }

  Machine& add_machine(const std::string& name) {
    if (machines_.count(name)) throw ValidationError("simworld: duplicate machine " + name);
    auto m = std::make_unique<Machine>();
    m->name = name;
    m->host_id = name == kRobotMachine ? 1 : next_host_id_++;
    m->identity = generate_keypair(rng_.fork_seed());
    m->socket = net_.open(name, 0);
    Mesh::Config mc;
    mc.identity = m->identity;
    mc.index_seed = rng_.fork_seed();
    m->mesh = std::make_unique<Mesh>(ex_, *m->socket, mc);
    Machine* raw = m.get();
    m->mesh->set_sniffer([raw](ByteView datagram) { raw->wire_bytes_out += datagram.size(); });
    Router::Config rc;
    rc.machine_name = name;
    rc.host_id = m->host_id;
    m->router = std::make_unique<Router>(ex_, *m->mesh, rc);
    auto& ref = *m;
    machines_[name] = std::move(m);
    return ref;
  }

  Machine& machine(const std::string& name) {
    auto it = machines_.find(name);
    if (it == machines_.end()) throw NotFoundError("simworld: unknown machine " + name);
    return *it->second;
  }

  // Symmetric link with per-direction shaping; completes the handshake and
  // primes both routers' peer tables before returning.
  void link(const std::string& a_name, const std::string& b_name, const LinkModel& ab,
            const LinkModel& ba) {
    Machine& a = machine(a_name);
    Machine& b = machine(b_name);
    a.mesh->allow_peer(b.identity.public_key);
    b.mesh->allow_peer(a.identity.public_key);
    a.mesh->set_link_model(b.identity.public_key, ab, rng_.fork_seed());
    b.mesh->set_link_model(a.identity.public_key, ba, rng_.fork_seed());
    bool ok = false;
    a.mesh->connect(b.identity.public_key, b.socket->local_endpoint(),
                    [&ok](bool established) { ok = established; });
    ex_.run_for(10'000'000);
    if (!ok || !a.mesh->has_session(b.identity.public_key) ||
        !b.mesh->has_session(a.identity.public_key))
      throw Error("simworld: handshake failed " + a_name + " <-> " + b_name);
    a.router->add_peer(b.identity.public_key, b.host_id);
    b.router->add_peer(a.identity.public_key, a.host_id);
    ex_.run_for(10'000);
  }

  void link(const std::string& a, const std::string& b, const LinkModel& both) {
    link(a, b, both, both);
  }

  // Starts the behavior for one node spec on its machine (which must exist).
  Behavior* launch_node(const NodeSpec& spec) {
    Machine& m = machine(spec.machine);
    m.behaviors.push_back(make_behavior(*m.router, spec));
    m.behaviors.back()->start();
    return m.behaviors.back().get();
  }

  // Launches every node of the spec, cloud machines' nodes before robot ones.
  void launch_all(const LaunchSpec& spec) {
    for (const auto& n : spec.nodes)
      if (n.machine != kRobotMachine) launch_node(n);
    ex_.run_for(10'000);
    for (const auto& n : spec.nodes)
      if (n.machine == kRobotMachine) launch_node(n);
  }

  SimExecutor& executor() { return ex_; }
  Router& router(const std::string& name) { return *machine(name).router; }
  Rng& rng() { return rng_; }

  std::uint64_t total_wire_bytes() const {
    std::uint64_t sum = 0;
    for (const auto& [name, m] : machines_) sum += m->wire_bytes_out;
    return sum;
  }

  void run_for(Micros d) { ex_.run_for(d); }
  Micros now() { return ex_.now(); }

 private:
  Rng rng_;
  SimExecutor ex_;
  SimNet net_;
  std::map<std::string, std::unique_ptr<Machine>> machines_;
  std::uint16_t next_host_id_ = 2;
};

}  // namespace fogmesh
