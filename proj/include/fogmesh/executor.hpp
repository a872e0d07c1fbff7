#pragma once

#include <poll.h>
#include <sys/eventfd.h>
#include <unistd.h>

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <queue>
#include <set>
#include <thread>
#include <vector>

#include "fogmesh/errors.hpp"

namespace fogmesh {

// Microseconds. Simulated executors start at 0; the real executor uses
// CLOCK_MONOTONIC, which is shared by every process on the host.
using Micros = std::uint64_t;

inline Micros monotonic_now() {
  timespec ts{};
  clock_gettime(CLOCK_MONOTONIC, &ts);
  return static_cast<Micros>(ts.tv_sec) * 1'000'000 + static_cast<Micros>(ts.tv_nsec) / 1'000;
}

// Single-threaded timer/event context. All protocol components (router,
// tunnels, codec nodes, agents) run as callbacks on one of these, which is
// what lets the same code run over real UDP or inside the deterministic
// simulation.
class Executor {
 public:
  virtual ~Executor() = default;

  virtual Micros now() = 0;
  virtual std::uint64_t schedule_at(Micros t, std::function<void()> fn) = 0;
  virtual void cancel(std::uint64_t id) = 0;
  // Runs fn on the executor context as soon as possible. Thread-safe.
  virtual void post(std::function<void()> fn) = 0;
  virtual bool on_executor_thread() const = 0;
  // True once the event loop has been told to exit. Posted work no longer
  // runs after that point.
  virtual bool stopped() const { return false; }

  std::uint64_t schedule_after(Micros delay, std::function<void()> fn) {
    return schedule_at(now() + delay, std::move(fn));
  }
};

// Runs fn on the executor thread and waits for completion, so the caller
// knows no callback is concurrently touching whatever fn tears down. Once
// the executor has stopped, fn runs inline instead: the loop is gone and
// there is nothing left to race against.
template <typename Fn>
void run_on_executor(Executor& ex, Fn fn) {
  if (ex.on_executor_thread() || ex.stopped()) {
    fn();
    return;
  }
  struct Shared {
    std::mutex mu;
    std::condition_variable cv;
    std::once_flag once;
    bool done = false;
  };
  auto sh = std::make_shared<Shared>();
  auto work = std::make_shared<Fn>(std::move(fn));
  auto invoke = [sh, work] {
    std::call_once(sh->once, [&] { (*work)(); });
    std::lock_guard lk(sh->mu);
    sh->done = true;
    sh->cv.notify_one();
  };
  ex.post(invoke);
  std::unique_lock lk(sh->mu);
  while (!sh->cv.wait_for(lk, std::chrono::milliseconds(20), [&] { return sh->done; })) {
    if (ex.stopped()) {  // queued closure will never run; once-guard keeps this single-shot
      lk.unlock();
      invoke();
      return;
    }
  }
}

// Virtual-time executor: a discrete event queue. Events at equal instants run
// in scheduling order, so a given seed always produces the same history.
class SimExecutor final : public Executor {
 public:
  Micros now() override { return now_; }

  std::uint64_t schedule_at(Micros t, std::function<void()> fn) override {
    std::uint64_t id = next_id_++;
    queue_.emplace(Entry{t < now_ ? now_ : t, seq_++, id, std::move(fn)});
    return id;
  }

  void cancel(std::uint64_t id) override { cancelled_.insert(id); }

  void post(std::function<void()> fn) override { schedule_at(now_, std::move(fn)); }

  bool on_executor_thread() const override { return true; }

  bool step() {
    while (!queue_.empty()) {
      Entry e = queue_.top();
      queue_.pop();
      if (cancelled_.erase(e.id)) continue;
      now_ = e.t;
      e.fn();
      return true;
    }
    return false;
  }

  void run_until_idle() {
    while (step()) {
    }
  }

  // Runs events up to and including instant t, then sets now to t.
  void run_until(Micros t) {
    while (!queue_.empty()) {
      if (queue_.top().t > t) break;
      step();
    }
    if (now_ < t) now_ = t;
  }

  void run_for(Micros d) { run_until(now_ + d); }

  bool idle() const { return queue_.empty(); }

 private:
  struct Entry {
    Micros t;
    std::uint64_t seq;
    std::uint64_t id;
    std::function<void()> fn;
    bool operator>(const Entry& o) const { return t != o.t ? t > o.t : seq > o.seq; }
  };

  Micros now_ = 0;
  std::uint64_t seq_ = 0;
  std::uint64_t next_id_ = 1;
  std::priority_queue<Entry, std::vector<Entry>, std::greater<>> queue_;
  std::set<std::uint64_t> cancelled_;
};

// Wall-clock executor: one background thread multiplexing timers and
// registered file descriptors through poll(2).
class RealExecutor final : public Executor {
 public:
  RealExecutor() {
    wake_fd_ = eventfd(0, EFD_NONBLOCK);
    if (wake_fd_ < 0) throw Error("eventfd failed");
    thread_ = std::thread([this] { loop(); });
  }

  ~RealExecutor() override { stop(); }

  void stop() {
    {
      std::lock_guard lk(mu_);
      if (stopping_) return;
      stopping_ = true;
    }
    wake();
    if (thread_.joinable()) thread_.join();
    close(wake_fd_);
  }

  Micros now() override { return monotonic_now(); }

  std::uint64_t schedule_at(Micros t, std::function<void()> fn) override {
    std::uint64_t id;
    {
      std::lock_guard lk(mu_);
      id = next_id_++;
      timers_.emplace(TimerKey{t, id}, std::move(fn));
    }
    wake();
    return id;
  }

  void cancel(std::uint64_t id) override {
    std::lock_guard lk(mu_);
    for (auto it = timers_.begin(); it != timers_.end(); ++it) {
      if (it->first.id == id) {
        timers_.erase(it);
        return;
      }
    }
  }

  void post(std::function<void()> fn) override {
    {
      std::lock_guard lk(mu_);
      posted_.push_back(std::move(fn));
    }
    wake();
  }

  bool on_executor_thread() const override { return std::this_thread::get_id() == thread_.get_id(); }

  bool stopped() const override {
    std::lock_guard lk(mu_);
    return stopping_;
  }

  // fd handlers run on the executor thread when the fd becomes readable.
  void register_fd(int fd, std::function<void()> on_readable) {
    {
      std::lock_guard lk(mu_);
      fds_[fd] = std::move(on_readable);
    }
    wake();
  }

  void unregister_fd(int fd) {
    if (on_executor_thread()) {
      std::lock_guard lk(mu_);
      fds_.erase(fd);
      return;
    }
    {
      std::lock_guard lk(mu_);
      if (stopping_) {  // loop has exited; handlers can no longer fire
        fds_.erase(fd);
        return;
      }
    }
    // Synchronize so the handler cannot fire after removal. Shared state: we
    // may bail out early on executor stop while the closure is still queued.
    struct Ack {
      std::mutex mu;
      std::condition_variable cv;
      bool done = false;
    };
    auto ack = std::make_shared<Ack>();
    post([this, fd, ack] {
      {
        std::lock_guard lk(mu_);
        fds_.erase(fd);
      }
      std::lock_guard dlk(ack->mu);
      ack->done = true;
      ack->cv.notify_one();
    });
    std::unique_lock dlk(ack->mu);
    while (!ack->cv.wait_for(dlk, std::chrono::milliseconds(20), [&] { return ack->done; })) {
      // The executor may stop while we wait; its loop never drains the posted
      // closure in that case, so take the removal into our own hands.
      std::lock_guard lk(mu_);
      if (stopping_) {
        fds_.erase(fd);
        return;
      }
    }
  }

 private:
  struct TimerKey {
    Micros t;
    std::uint64_t id;
    bool operator<(const TimerKey& o) const { return t != o.t ? t < o.t : id < o.id; }
  };

  void wake() {
    std::uint64_t one = 1;
    [[maybe_unused]] ssize_t n = write(wake_fd_, &one, sizeof one);
  }

  void loop() {
    while (true) {
      std::vector<std::function<void()>> run_now;
      int timeout_ms = -1;
      std::vector<pollfd> pfds;
      std::vector<int> fd_order;
      {
        std::lock_guard lk(mu_);
        if (stopping_) return;
        Micros t = monotonic_now();
        while (!timers_.empty() && timers_.begin()->first.t <= t) {
          run_now.push_back(std::move(timers_.begin()->second));
          timers_.erase(timers_.begin());
        }
        for (auto& fn : posted_) run_now.push_back(std::move(fn));
        posted_.clear();
        if (run_now.empty() && !timers_.empty()) {
          Micros dt = timers_.begin()->first.t - t;
          timeout_ms = static_cast<int>(dt / 1000) + 1;
        }
        pfds.push_back({wake_fd_, POLLIN, 0});
        for (auto& [fd, _] : fds_) {
          pfds.push_back({fd, POLLIN, 0});
          fd_order.push_back(fd);
        }
      }
      for (auto& fn : run_now) fn();
      if (!run_now.empty()) continue;

      int rc = poll(pfds.data(), pfds.size(), timeout_ms);
      if (rc < 0) continue;
      if (pfds[0].revents & POLLIN) {
        std::uint64_t drain;
        while (read(wake_fd_, &drain, sizeof drain) > 0) {
        }
      }
      for (std::size_t i = 1; i < pfds.size(); ++i) {
        if (!(pfds[i].revents & POLLIN)) continue;
        std::function<void()> handler;
        {
          std::lock_guard lk(mu_);
          auto it = fds_.find(fd_order[i - 1]);
          if (it != fds_.end()) handler = it->second;
        }
        if (handler) handler();
      }
    }
  }

  mutable std::mutex mu_;
  bool stopping_ = false;
  std::uint64_t next_id_ = 1;
  std::map<TimerKey, std::function<void()>> timers_;
  std::vector<std::function<void()>> posted_;
  std::map<int, std::function<void()>> fds_;
  int wake_fd_ = -1;
  std::thread thread_;
};

}  // namespace fogmesh
