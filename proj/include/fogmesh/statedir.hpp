#pragma once

#include <fcntl.h>
#include <sys/file.h>
#include <sys/stat.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "fogmesh/errors.hpp"

namespace fogmesh {

inline constexpr const char* kStateDirEnv = "FOG_STATE_DIR";

// On-disk layout under one root:
//   .lock                cross-process advisory lock
//   identity.key         operator keypair (mode 0600)
//   instances.json       machine handles across deployments
//   images.json          image registry
//   pool.json            warm pool state
//   deployments/<id>.json
//   machines/<id>/       per-machine agent workdirs
class StateDir {
 public:
  using Json = nlohmann::json;

  static std::filesystem::path resolve(const std::string& cli_override = "") {
    if (!cli_override.empty()) return cli_override;
    if (const char* env = std::getenv(kStateDirEnv); env && *env) return env;
    if (const char* home = std::getenv("HOME"); home && *home)
      return std::filesystem::path(home) / ".fogmesh";
    return std::filesystem::path("/tmp") / "fogmesh-state";
  }

  explicit StateDir(std::filesystem::path root) : root_(std::move(root)) { ensure(); }

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path instances_file() const { return root_ / "instances.json"; }
  std::filesystem::path images_file() const { return root_ / "images.json"; }
  std::filesystem::path pool_file() const { return root_ / "pool.json"; }
  std::filesystem::path identity_file() const { return root_ / "identity.key"; }
  std::filesystem::path deployments_dir() const { return root_ / "deployments"; }
  std::filesystem::path deployment_file(const std::string& id) const {
    return deployments_dir() / (id + ".json");
  }
  std::filesystem::path machines_dir() const { return root_ / "machines"; }
  std::filesystem::path machine_workdir(const std::string& id) const {
    return machines_dir() / id;
  }

  void ensure() const {
    std::error_code ec;
    std::filesystem::create_directories(deployments_dir(), ec);
    std::filesystem::create_directories(machines_dir(), ec);
    if (ec) throw Error("state dir: cannot create " + root_.string() + ": " + ec.message());
  }

  std::optional<std::string> read(const std::filesystem::path& p) const {
    std::ifstream in(p, std::ios::binary);
    if (!in) return std::nullopt;
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return data;
  }

  // Write-temp-then-rename; readers never observe a partial file.
  void atomic_write(const std::filesystem::path& p, const std::string& data,
                    bool private_mode = false) const {
    std::filesystem::path tmp = p;
    tmp += ".tmp." + std::to_string(::getpid());
    {
      int flags = O_WRONLY | O_CREAT | O_TRUNC;
      int fd = ::open(tmp.c_str(), flags, private_mode ? 0600 : 0644);
      if (fd < 0) throw Error("state dir: cannot write " + tmp.string());
      std::size_t off = 0;
      while (off < data.size()) {
        ssize_t n = ::write(fd, data.data() + off, data.size() - off);
        if (n < 0) {
          ::close(fd);
          ::unlink(tmp.c_str());
          throw Error("state dir: short write to " + tmp.string());
        }
        off += static_cast<std::size_t>(n);
      }
      ::fsync(fd);
      ::close(fd);
    }
    if (::rename(tmp.c_str(), p.c_str()) != 0) {
      ::unlink(tmp.c_str());
      throw Error("state dir: rename failed for " + p.string());
    }
  }

  Json read_json(const std::filesystem::path& p, Json fallback) const {
    auto data = read(p);
    if (!data) return fallback;
    try {
      return Json::parse(*data);
    } catch (const Json::parse_error&) {
      throw Error("state dir: corrupt json in " + p.string());
    }
  }

  void write_json(const std::filesystem::path& p, const Json& j,
                  bool private_mode = false) const {
    atomic_write(p, j.dump(2) + "\n", private_mode);
  }

  // flock-based advisory exclusive lock for read-modify-write cycles.
  class Lock {
   public:
    explicit Lock(const std::filesystem::path& root) {
      fd_ = ::open((root / ".lock").c_str(), O_RDWR | O_CREAT, 0644);
      if (fd_ < 0) throw Error("state dir: cannot open lock file");
      if (::flock(fd_, LOCK_EX) != 0) {
        ::close(fd_);
        throw Error("state dir: flock failed");
      }
    }
    ~Lock() {
      if (fd_ >= 0) {
        ::flock(fd_, LOCK_UN);
        ::close(fd_);
      }
    }
    Lock(const Lock&) = delete;
    Lock& operator=(const Lock&) = delete;
    Lock(Lock&& o) noexcept : fd_(o.fd_) { o.fd_ = -1; }

   private:
    int fd_ = -1;
  };

  Lock lock() const { return Lock(root_); }

 private:
  std::filesystem::path root_;
};

}  // namespace fogmesh
