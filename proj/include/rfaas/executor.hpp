// Copyright 2026 The rfaas Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "rfaas/core.hpp"
#include "rfaas/manager_http.hpp"
#include "rfaas/memory_service.hpp"
#include "rfaas/net.hpp"
#include "rfaas/sandbox.hpp"
#include "rfaas/warm_pool.hpp"
#include "rfaas/wire.hpp"

// Per-node worker. Registers its node with the resource manager, serves
// invocations over direct client connections, owns the sandbox processes and
// the warm pool, serves memory-service operations without entering user
// code, and executes the drain protocol when the node is reclaimed.
//
// Connection modes: hot connections busy-poll the socket between requests
// and keep their sandbox checked out; warm connections park on a blocking
// wait and return the sandbox to the pool after every invocation. Requests
// on one connection are served in order; concurrency comes from connections.

namespace rfaas::executor {

struct ExecutorConfig {
  std::string node_id = "node0";
  std::string rm_endpoint;  // empty: run detached (no registration)
  std::string listen_addr = "127.0.0.1:0";
  std::string advertise_host = "127.0.0.1";
  int64_t warm_pool_budget_mb = 1024;
  int64_t serving_cores = 1;
  bool hot_mode = false;
  // image_ref -> entry point; images naming a built-in entry directly need
  // no mapping.
  std::map<std::string, std::string> image_registry;
  uint32_t max_payload = wire::kDefaultMaxPayload;
  int64_t deadline_slack_ms = 50;
  ResourceVector total{0, 0, 0};  // zero: probe the machine
  std::optional<int64_t> availability_hint_s;
  manager::NodeSharing sharing = manager::NodeSharing::opt_in;
  std::optional<policy::JobDescriptor> job;
  std::string swap_dir = memsvc::default_swap_dir();
  int64_t touch_interval_ms = 30'000;

  void validate() const {
    if (serving_cores < 1) {
      throw Error("malformed", "serving_cores must be at least 1");
    }
    if (node_id.empty()) throw Error("malformed", "empty node_id");
  }
};

class Executor {
 public:
  explicit Executor(ExecutorConfig cfg)
      : cfg_(std::move(cfg)),
        pool_(cfg_.warm_pool_budget_mb),
        blocks_(cfg_.swap_dir) {
    cfg_.validate();
    if (cfg_.total.zero()) {
      cfg_.total = {static_cast<int64_t>(std::thread::hardware_concurrency()),
                    4096, 0};
    }
  }

  ~Executor() {
    try {
      drain(/*immediate=*/true, /*notify_rm=*/false);
    } catch (...) {
    }
    join_threads();
  }

  // Binds the listener and registers the node with the resource manager;
  // wait() then blocks until the node drains.
  void start() {
    listener_ = net::Listener(cfg_.listen_addr);
    endpoint_ =
        cfg_.advertise_host + ":" + std::to_string(listener_.bound_port());
    if (!cfg_.rm_endpoint.empty()) {
      manager::RmClient rm(cfg_.rm_endpoint);
      manager::NodeDescriptor desc;
      desc.node_id = cfg_.node_id;
      desc.total = cfg_.total;
      desc.reserved_serving_cores = cfg_.serving_cores;
      desc.availability_hint_s = cfg_.availability_hint_s;
      desc.sharing = cfg_.sharing;
      desc.endpoint = endpoint_;
      desc.job = cfg_.job;
      rm.register_node(desc);
    }
    acceptor_ = std::thread([this] { accept_loop(); });
    if (!cfg_.rm_endpoint.empty()) {
      toucher_ = std::thread([this] { touch_loop(); });
    }
  }

  void wait() {
    std::unique_lock lock(mu_);
    drained_cv_.wait(lock, [this] { return drain_done_.load(); });
  }

  void serve() {
    start();
    wait();
    join_threads();
  }

  const std::string& endpoint() const { return endpoint_; }
  const ExecutorConfig& config() const { return cfg_; }

  // Returns the node to the batch system. Graceful drains stop admitting
  // work and let in-flight invocations finish (each bounded by its
  // deadline); immediate drains kill them and answer status=terminated.
  // Every admitted request is answered before its socket closes.
  // Idempotent: late callers get the same report.
  wire::DrainReport drain(bool immediate, bool notify_rm) {
    std::vector<std::shared_ptr<sandbox::Sandbox>> to_kill;
    {
      std::unique_lock lock(mu_);
      if (drain_done_.load()) return report_;
      if (draining_.load()) {
        drained_cv_.wait(lock, [this] { return drain_done_.load(); });
        return report_;
      }
      draining_.store(true);
      for (auto& [id, rec] : inflight_) {
        rec.in_scope = true;
        if (immediate) {
          rec.drain_killed = true;
          if (rec.sb) to_kill.push_back(rec.sb);
        }
      }
      outstanding_ = inflight_.size();
    }
    for (auto& sb : to_kill) sb->kill_now();

    {
      std::unique_lock lock(mu_);
      inflight_cv_.wait(lock, [this] { return outstanding_ == 0; });
    }
    // Requests already pipelined behind the in-flight work are still sitting
    // in socket buffers; give the connection threads a beat to read and
    // reject them so the report counts every queued invocation.
    std::this_thread::sleep_for(std::chrono::milliseconds(100));

    listener_.close();
    pool_.clear();
    {
      std::lock_guard lock(mu_);
      for (auto& [id, lease] : leases_) {
        lease.active = false;
        blocks_.drop_lease(id);
      }
    }

    wire::DrainReport report;
    {
      std::lock_guard lock(mu_);
      report.aborted = aborted_;
      report.completed = completed_;
      report_ = report;
      drain_done_.store(true);
    }
    drained_cv_.notify_all();

    if (notify_rm && !cfg_.rm_endpoint.empty()) {
      try {
        manager::RmClient rm(cfg_.rm_endpoint);
        rm.remove_node(cfg_.node_id, immediate);
      } catch (const Error&) {
        // Manager gone; nothing left to hand back.
      }
    }
    return report;
  }

  // Direct lease installation, used by tests that drive the executor
  // without a resource manager.
  void install_lease(const wire::LeaseGrant& grant) {
    std::lock_guard lock(mu_);
    leases_[grant.lease_id] = LeaseInfo{grant, true, now_ms()};
  }

  // Spawns a sandbox for the image and parks it warm.
  void prewarm(const std::string& image_ref, int64_t memory_mb) {
    pool_.insert(spawn(image_ref, memory_mb));
  }

  int64_t shed_warm_pool(int64_t target_free_mb) {
    return pool_.shed(target_free_mb);
  }

  size_t warm_pool_size() const { return pool_.size(); }

  // Every sandbox pid this executor ever spawned; after a drain none of
  // them may be alive.
  std::vector<pid_t> spawned_pids() const {
    std::lock_guard lock(mu_);
    return spawned_pids_;
  }

  size_t live_sandboxes() const {
    std::lock_guard lock(mu_);
    size_t n = pool_.size();
    for (const auto& [id, rec] : inflight_) {
      if (rec.sb && rec.sb->alive()) ++n;
    }
    for (const auto& [conn, sb] : bound_) {
      if (sb && sb->alive()) ++n;
    }
    return n;
  }

 private:
  struct LeaseInfo {
    wire::LeaseGrant grant;
    bool active = false;
    int64_t last_activity = 0;
  };

  struct InflightRec {
    std::shared_ptr<sandbox::Sandbox> sb;  // null until acquired
    bool in_scope = false;                 // counted by the drain report
    bool drain_killed = false;
  };

  void join_threads() {
    if (acceptor_.joinable()) acceptor_.join();
    if (toucher_.joinable()) toucher_.join();
    std::vector<std::thread> conns;
    {
      std::lock_guard lock(mu_);
      conns.swap(conn_threads_);
    }
    for (auto& t : conns) {
      if (t.joinable()) t.join();
    }
  }

  void accept_loop() {
    uint64_t conn_id = 0;
    while (!drain_done_.load()) {
      net::Socket sock = listener_.accept(100);
      if (!sock.valid()) continue;
      if (draining_.load()) continue;  // drop: no new work during drain
      uint64_t id = conn_id++;
      std::lock_guard lock(mu_);
      conn_threads_.emplace_back(
          [this, id](net::Socket s) { serve_connection(id, std::move(s)); },
          std::move(sock));
    }
  }

  void touch_loop() {
    manager::RmClient rm(cfg_.rm_endpoint);
    int64_t last_round = now_ms();
    while (!drain_done_.load()) {
      std::this_thread::sleep_for(std::chrono::milliseconds(200));
      if (now_ms() - last_round < cfg_.touch_interval_ms) continue;
      last_round = now_ms();
      std::vector<uint64_t> to_touch;
      {
        std::lock_guard lock(mu_);
        for (const auto& [id, lease] : leases_) {
          if (lease.active &&
              lease.last_activity >= last_round - cfg_.touch_interval_ms * 2) {
            to_touch.push_back(id);
          }
        }
      }
      for (uint64_t id : to_touch) {
        try {
          rm.touch_lease(id);
        } catch (const Error&) {
        }
      }
    }
  }

  // Hot connections spin on the socket; warm connections block. Returns
  // false once the connection should stop reading.
  bool await_frame(net::Socket& sock, bool hot) {
    uint8_t probe = 0;
    for (uint64_t i = 0;; ++i) {
      if (drain_done_.load()) return false;
      if (hot) {
        ssize_t n = ::recv(sock.fd(), &probe, 1, MSG_PEEK | MSG_DONTWAIT);
        if (n > 0) return true;
        if (n == 0) return false;  // peer gone
        if (errno != EAGAIN && errno != EWOULDBLOCK && errno != EINTR) {
          return false;
        }
        sandbox::detail::cpu_relax();
        if ((i & 0x3ff) == 0x3ff) std::this_thread::yield();
      } else {
        if (sock.wait_readable(50)) return true;
      }
    }
  }

  void serve_connection(uint64_t conn_id, net::Socket sock) {
    std::shared_ptr<sandbox::Sandbox> bound;
    auto update_bound = [&](std::shared_ptr<sandbox::Sandbox> sb) {
      bound = std::move(sb);
      std::lock_guard lock(mu_);
      bound_[conn_id] = bound;
    };

    for (;;) {
      if (!await_frame(sock, cfg_.hot_mode && bound != nullptr)) break;
      wire::Frame frame;
      bool oversized = false;
      try {
        if (!wire::read_frame(sock, frame, cfg_.max_payload)) break;
      } catch (const Error& e) {
        if (e.code() == "payload-too-large") {
          oversized = true;
        } else {
          break;  // corrupt stream or peer loss: nothing to answer
        }
      }

      try {
        if (oversized) {
          auto* req = std::get_if<wire::Request>(&frame);
          respond_error(sock, req ? req->invocation_id : 0,
                        "payload-too-large");
          continue;
        }
        if (auto* req = std::get_if<wire::Request>(&frame)) {
          handle_request(sock, *req, update_bound, bound);
        } else if (auto* mem = std::get_if<wire::MemOp>(&frame)) {
          handle_memop(sock, *mem);
        } else if (auto* grant = std::get_if<wire::LeaseGrant>(&frame)) {
          uint8_t status = 1;
          {
            std::lock_guard lock(mu_);
            if (!draining_.load()) {
              leases_[grant->lease_id] = LeaseInfo{*grant, true, now_ms()};
              status = 0;
            }
          }
          wire::write_frame(sock, wire::Ack{status});
        } else if (auto* revoke = std::get_if<wire::LeaseRevoke>(&frame)) {
          {
            std::lock_guard lock(mu_);
            auto it = leases_.find(revoke->lease_id);
            if (it != leases_.end()) it->second.active = false;
            blocks_.drop_lease(revoke->lease_id);
          }
          wire::write_frame(sock, wire::Ack{0});
        } else if (auto* dr = std::get_if<wire::Drain>(&frame)) {
          auto report = drain(dr->mode == 1, /*notify_rm=*/false);
          wire::write_frame(sock, report);
          break;
        } else {
          break;  // unexpected frame for this direction
        }
      } catch (const Error&) {
        break;  // peer vanished mid-reply
      }
    }
    {
      std::lock_guard lock(mu_);
      bound_.erase(conn_id);
    }
    // A dedicated hot sandbox goes back to the pool when its client leaves.
    if (bound && bound->alive()) {
      if (draining_.load()) {
        bound->kill_now();
      } else {
        pool_.insert(std::move(bound));
      }
    }
  }

  template <typename UpdateBound>
  void handle_request(net::Socket& sock, const wire::Request& req,
                      UpdateBound&& update_bound,
                      const std::shared_ptr<sandbox::Sandbox>& bound) {
    int64_t received_at = now_ms();

    // Admission: resolve the lease and enter the in-flight table atomically
    // with the drain check, so a drain either sees this invocation or it was
    // rejected.
    wire::LeaseGrant grant;
    uint64_t inflight_id = 0;
    std::string reject_code;
    {
      std::lock_guard lock(mu_);
      if (draining_.load()) {
        ++aborted_;  // arrived during the drain window, never ran
        reject_code = "draining";
      } else {
        const LeaseInfo* lease = nullptr;
        for (const auto& [id, info] : leases_) {
          if (info.active && info.grant.function_id == req.function_id &&
              info.grant.kind == static_cast<uint8_t>(FunctionKind::compute)) {
            lease = &info;
            break;
          }
        }
        if (lease == nullptr) {
          reject_code = "unknown-lease";
        } else {
          grant = lease->grant;
          leases_[grant.lease_id].last_activity = received_at;
          inflight_id = next_inflight_id_++;
          inflight_[inflight_id] = InflightRec{};
        }
      }
    }
    if (inflight_id == 0) {
      respond_error(sock, req.invocation_id, reject_code);
      return;
    }

    std::string entry = resolve_entry(grant.image_ref);
    if (entry.empty()) {
      retire_inflight(inflight_id, /*count_aborted=*/false);
      respond_error(sock, req.invocation_id, "registry-miss");
      return;
    }

    // Sandbox acquisition: dedicated hot sandbox, then warm pool, then a
    // cold start.
    int64_t acquire_start = now_ms();
    uint32_t queue_ms = static_cast<uint32_t>(acquire_start - received_at);
    uint32_t sandbox_ms = 0;
    std::shared_ptr<sandbox::Sandbox> sb;
    if (bound && bound->alive() && bound->image_ref() == grant.image_ref) {
      sb = bound;
    } else {
      sb = pool_.checkout(grant.image_ref);
    }
    if (!sb) {
      int64_t t0 = now_ms();
      try {
        sb = spawn(grant.image_ref, static_cast<int64_t>(grant.memory_mb));
      } catch (const Error& e) {
        retire_inflight(inflight_id, /*count_aborted=*/false);
        respond_error(sock, req.invocation_id, e.code());
        return;
      }
      // Whole-ms clock: a spawn is never free, so a cold start reads >= 1.
      sandbox_ms = static_cast<uint32_t>(std::max<int64_t>(1, now_ms() - t0));
    }

    bool pre_killed = false;
    {
      std::lock_guard lock(mu_);
      auto& rec = inflight_.at(inflight_id);
      rec.sb = sb;
      pre_killed = rec.drain_killed;  // immediate drain hit mid-cold-start
    }
    if (pre_killed) sb->kill_now();

    int64_t exec_start = now_ms();
    auto outcome = sb->invoke(req.invocation_id, req.payload,
                              static_cast<uint32_t>(grant.max_duration_ms),
                              grant.max_duration_ms + cfg_.deadline_slack_ms);
    uint32_t exec_ms = static_cast<uint32_t>(now_ms() - exec_start);

    bool killed_by_drain = false;
    bool in_scope = false;
    {
      std::lock_guard lock(mu_);
      auto it = inflight_.find(inflight_id);
      killed_by_drain = it->second.drain_killed;
      in_scope = it->second.in_scope;
      inflight_.erase(it);
      if (in_scope && outstanding_ > 0 && --outstanding_ == 0) {
        inflight_cv_.notify_all();
      }
    }

    wire::Response resp;
    resp.invocation_id = req.invocation_id;
    resp.timings = {queue_ms, sandbox_ms, exec_ms};
    bool park = false;
    switch (outcome.what) {
      case sandbox::InvokeOutcome::What::completed:
        resp.status = outcome.status;
        resp.payload = std::move(outcome.payload);
        park = true;
        break;
      case sandbox::InvokeOutcome::What::timed_out:
        sb->kill_now();
        resp.status = InvocationStatus::error;
        resp.payload = to_bytes("deadline");
        break;
      case sandbox::InvokeOutcome::What::died:
        if (killed_by_drain) {
          resp.status = InvocationStatus::terminated;
        } else {
          resp.status = InvocationStatus::error;
          resp.payload = to_bytes("sandbox-crashed");
        }
        break;
    }

    if (in_scope) {
      std::lock_guard lock(mu_);
      if (resp.status == InvocationStatus::terminated || killed_by_drain) {
        ++aborted_;
      } else {
        ++completed_;
      }
    }

    if (park && sb->alive()) {
      if (draining_.load()) {
        sb->kill_now();
      } else if (cfg_.hot_mode) {
        if (sb != bound) {
          if (bound && bound->alive()) pool_.insert(bound);
          update_bound(sb);
        }
      } else {
        pool_.insert(sb);
      }
    }

    wire::write_frame(sock, resp);
  }

  void retire_inflight(uint64_t inflight_id, bool count_aborted) {
    std::lock_guard lock(mu_);
    auto it = inflight_.find(inflight_id);
    if (it == inflight_.end()) return;
    bool in_scope = it->second.in_scope;
    inflight_.erase(it);
    if (in_scope) {
      if (count_aborted) ++aborted_;
      if (outstanding_ > 0 && --outstanding_ == 0) inflight_cv_.notify_all();
    }
  }

  // Memory-service operations are served here, without entering user
  // function code. alloc resolves the owning lease from the function_id it
  // carries; get encodes the read length as 4 big-endian bytes.
  void handle_memop(net::Socket& sock, const wire::MemOp& op) {
    wire::MemResult result;
    result.block_id = op.block_id;
    try {
      switch (op.op) {
        case wire::MemOpCode::alloc: {
          std::string function_id(op.bytes.begin(), op.bytes.end());
          wire::LeaseGrant grant;
          {
            std::lock_guard lock(mu_);
            const LeaseInfo* lease = nullptr;
            for (const auto& [id, info] : leases_) {
              if (info.grant.function_id == function_id &&
                  info.grant.kind ==
                      static_cast<uint8_t>(FunctionKind::memory_service)) {
                if (!info.active) throw Error("terminated-lease", function_id);
                lease = &info;
                break;
              }
            }
            if (lease == nullptr) {
              throw Error("invalid-lease",
                          "no memory-service lease for " + function_id);
            }
            grant = lease->grant;
          }
          uint64_t block_id = blocks_.allocate(
              grant.lease_id, static_cast<int64_t>(grant.memory_mb), op.offset);
          {
            std::lock_guard lock(mu_);
            block_owner_[block_id] = grant.lease_id;
          }
          result.block_id = block_id;
          break;
        }
        case wire::MemOpCode::put:
          check_block_lease(op.block_id);
          blocks_.put(op.block_id, op.offset, op.bytes.data(), op.bytes.size());
          break;
        case wire::MemOpCode::get: {
          check_block_lease(op.block_id);
          if (op.bytes.size() != 4) {
            throw Error("malformed", "get needs a 4-byte length");
          }
          uint32_t len = static_cast<uint32_t>(op.bytes[0]) << 24 |
                         static_cast<uint32_t>(op.bytes[1]) << 16 |
                         static_cast<uint32_t>(op.bytes[2]) << 8 |
                         static_cast<uint32_t>(op.bytes[3]);
          result.payload = blocks_.get(op.block_id, op.offset, len);
          break;
        }
        case wire::MemOpCode::reclaim: {
          check_block_lease(op.block_id);
          auto receipt = blocks_.reclaim(op.block_id);
          result.payload = to_bytes(receipt.swap_path);
          break;
        }
      }
    } catch (const Error& e) {
      result.status = 1;
      result.payload = to_bytes(e.code());
    }
    wire::write_frame(sock, result);
  }

  void check_block_lease(uint64_t block_id) {
    std::lock_guard lock(mu_);
    auto it = block_owner_.find(block_id);
    if (it == block_owner_.end()) {
      throw Error("unknown-block", std::to_string(block_id));
    }
    auto lease = leases_.find(it->second);
    if (lease == leases_.end() || !lease->second.active) {
      throw Error("terminated-lease",
                  "block " + std::to_string(block_id) + " outlived its lease");
    }
  }

  std::string resolve_entry(const std::string& image_ref) const {
    auto it = cfg_.image_registry.find(image_ref);
    if (it != cfg_.image_registry.end()) return it->second;
    if (sandbox::builtin_entries().count(image_ref)) return image_ref;
    return "";
  }

  std::shared_ptr<sandbox::Sandbox> spawn(const std::string& image_ref,
                                          int64_t memory_mb) {
    std::string entry = resolve_entry(image_ref);
    if (entry.empty()) throw Error("registry-miss", image_ref);
    uint64_t id;
    {
      std::lock_guard lock(mu_);
      id = next_sandbox_id_++;
    }
    auto sb = std::make_shared<sandbox::Sandbox>(id, image_ref, entry,
                                                 memory_mb, cfg_.hot_mode);
    std::lock_guard lock(mu_);
    spawned_pids_.push_back(sb->pid());
    return sb;
  }

  static std::vector<uint8_t> to_bytes(const std::string& s) {
    return {s.begin(), s.end()};
  }

  void respond_error(net::Socket& sock, uint64_t invocation_id,
                     const std::string& code) {
    wire::Response resp;
    resp.invocation_id = invocation_id;
    resp.status = InvocationStatus::error;
    resp.payload = to_bytes(code);
    wire::write_frame(sock, resp);
  }

  ExecutorConfig cfg_;
  net::Listener listener_;
  std::string endpoint_;
  WarmPool<sandbox::Sandbox> pool_;
  memsvc::BlockTable blocks_;

  mutable std::mutex mu_;
  std::condition_variable drained_cv_;
  std::condition_variable inflight_cv_;
  std::map<uint64_t, LeaseInfo> leases_;
  std::map<uint64_t, InflightRec> inflight_;
  std::map<uint64_t, std::shared_ptr<sandbox::Sandbox>> bound_;
  std::map<uint64_t, uint64_t> block_owner_;
  std::vector<std::thread> conn_threads_;
  std::vector<pid_t> spawned_pids_;
  std::thread acceptor_;
  std::thread toucher_;
  std::atomic<bool> draining_{false};
  std::atomic<bool> drain_done_{false};
  size_t outstanding_ = 0;
  uint32_t aborted_ = 0;
  uint32_t completed_ = 0;
  wire::DrainReport report_;
  uint64_t next_inflight_id_ = 1;
  uint64_t next_sandbox_id_ = 1;
};

}  // namespace rfaas::executor
