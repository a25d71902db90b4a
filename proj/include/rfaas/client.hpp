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

#include <chrono>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "rfaas/core.hpp"
#include "rfaas/manager_http.hpp"
#include "rfaas/net.hpp"
#include "rfaas/wire.hpp"

// Client-side library. A FunctionHandle owns one lease and one direct
// channel to the serving executor. When the lease is terminated underneath
// it (node drained, idle expiry) the handle transparently re-acquires a
// lease and resubmits, up to the retry budget. Application errors are never
// retried.
//
// A handle serves one caller at a time; use one handle per thread.

namespace rfaas::client {

struct RetryPolicy {
  int max_releases = 3;
  int backoff_ms = 100;  // linear: attempt * backoff_ms
};

struct Ticket {
  uint64_t id = 0;
};

class FunctionHandle {
 public:
  FunctionHandle(FunctionSpec spec, const std::string& rm_endpoint,
                 std::string client_id = "client",
                 RetryPolicy retry = {})
      : spec_(std::move(spec)),
        rm_(rm_endpoint),
        client_id_(std::move(client_id)),
        retry_(retry) {
    acquire_and_connect();
  }

  ~FunctionHandle() {
    try {
      close();
    } catch (...) {
    }
  }

  FunctionHandle(const FunctionHandle&) = delete;
  FunctionHandle& operator=(const FunctionHandle&) = delete;

  const Lease& lease() const { return lease_; }
  int64_t connect_ms() const { return connect_ms_; }

  InvocationResult invoke(const std::vector<uint8_t>& payload) {
    Ticket t = invoke_async(payload);
    for (;;) {
      if (auto result = poll_impl(t, /*blocking=*/true)) return *result;
    }
  }

  InvocationResult invoke(const std::string& payload) {
    return invoke(std::vector<uint8_t>(payload.begin(), payload.end()));
  }

  Ticket invoke_async(const std::vector<uint8_t>& payload) {
    uint64_t ticket_id = next_ticket_id_++;
    Pending p;
    p.payload = payload;
    p.wire_id = next_wire_id_++;
    pending_[ticket_id] = std::move(p);
    try {
      send_request(pending_[ticket_id]);
    } catch (const Error&) {
      redirect_and_resubmit();
    }
    return Ticket{ticket_id};
  }

  // Non-blocking: nullopt while the invocation is still in flight. A ticket
  // yields its result exactly once; polling it again is an error.
  std::optional<InvocationResult> poll(const Ticket& ticket) {
    return poll_impl(ticket, /*blocking=*/false);
  }

  // --- memory-service operations ------------------------------------------

  uint64_t mem_alloc(uint64_t size_bytes) {
    wire::MemOp op;
    op.op = wire::MemOpCode::alloc;
    op.offset = size_bytes;
    op.bytes.assign(spec_.function_id.begin(), spec_.function_id.end());
    return mem_roundtrip(op).block_id;
  }

  void mem_put(uint64_t block_id, uint64_t offset,
               const std::vector<uint8_t>& bytes) {
    wire::MemOp op;
    op.op = wire::MemOpCode::put;
    op.block_id = block_id;
    op.offset = offset;
    op.bytes = bytes;
    mem_roundtrip(op);
  }

  std::vector<uint8_t> mem_get(uint64_t block_id, uint64_t offset,
                               uint32_t len) {
    wire::MemOp op;
    op.op = wire::MemOpCode::get;
    op.block_id = block_id;
    op.offset = offset;
    op.bytes = {static_cast<uint8_t>(len >> 24), static_cast<uint8_t>(len >> 16),
                static_cast<uint8_t>(len >> 8), static_cast<uint8_t>(len)};
    return mem_roundtrip(op).payload;
  }

  // Returns the swap file path.
  std::string mem_reclaim(uint64_t block_id) {
    wire::MemOp op;
    op.op = wire::MemOpCode::reclaim;
    op.block_id = block_id;
    auto result = mem_roundtrip(op);
    return std::string(result.payload.begin(), result.payload.end());
  }

  // Releases the lease and closes the channel.
  void close() {
    conn_.close();
    if (lease_.lease_id != 0) {
      uint64_t id = lease_.lease_id;
      lease_.lease_id = 0;
      try {
        rm_.release_lease(id);
      } catch (const Error&) {
        // Already terminated server-side.
      }
    }
  }

 private:
  struct Pending {
    std::vector<uint8_t> payload;
    uint64_t wire_id = 0;
    int retries = 0;
    std::optional<InvocationResult> result;
  };

  void acquire_and_connect() {
    lease_ = rm_.acquire_lease(spec_, client_id_);
    auto t0 = std::chrono::steady_clock::now();
    conn_ = net::connect_tcp(lease_.endpoint);
    connect_ms_ = std::chrono::duration_cast<std::chrono::milliseconds>(
                      std::chrono::steady_clock::now() - t0)
                      .count();
  }

  void send_request(const Pending& p) {
    wire::Request req;
    req.invocation_id = p.wire_id;
    req.function_id = spec_.function_id;
    req.payload = p.payload;
    wire::write_frame(conn_, req);
  }

  // Lease cancelled or channel lost: back off linearly, acquire a fresh
  // lease (possibly on another node) and resubmit everything outstanding
  // exactly once per new lease. Entries over their retry budget fail with
  // exhausted-retries.
  void redirect_and_resubmit() {
    conn_.close();
    if (lease_.lease_id != 0) {
      uint64_t id = lease_.lease_id;
      lease_.lease_id = 0;
      try {
        rm_.release_lease(id);
      } catch (const Error&) {
      }
    }
    int attempt = 1;
    for (auto& [ticket, p] : pending_) {
      if (p.result) continue;
      if (++p.retries > retry_.max_releases) {
        throw Error("exhausted-retries",
                    "lease terminated " + std::to_string(p.retries) +
                        " times for " + spec_.function_id);
      }
      attempt = std::max(attempt, p.retries);
    }
    std::this_thread::sleep_for(
        std::chrono::milliseconds(static_cast<int64_t>(attempt) *
                                  retry_.backoff_ms));
    acquire_and_connect();
    for (auto& [ticket, p] : pending_) {
      if (p.result) continue;
      p.wire_id = next_wire_id_++;
      send_request(p);
    }
  }

  static bool is_redirect_code(const InvocationResult& r) {
    if (r.status == InvocationStatus::terminated) return true;
    if (r.status != InvocationStatus::error) return false;
    std::string code = r.payload_str();
    return code == "draining" || code == "unknown-lease";
  }

  // Reads frames and files responses against pending invocations. Returns
  // once the wanted ticket resolves (blocking) or no data is ready.
  std::optional<InvocationResult> poll_impl(const Ticket& ticket,
                                            bool blocking) {
    auto it = pending_.find(ticket.id);
    if (it == pending_.end()) {
      throw Error("stale-ticket",
                  "ticket " + std::to_string(ticket.id) + " already consumed");
    }
    for (;;) {
      if (it->second.result) {
        if (is_redirect_code(*it->second.result)) {
          it->second.result.reset();
          redirect_and_resubmit();
        } else {
          InvocationResult result = std::move(*it->second.result);
          pending_.erase(it);
          return result;
        }
      }
      if (!blocking && !conn_.readable_now()) return std::nullopt;
      try {
        if (blocking) conn_.wait_readable(1000);
        if (!conn_.readable_now()) continue;
        wire::Frame frame;
        if (!wire::read_frame(conn_, frame)) {
          throw Error("connection-lost", "executor closed the channel");
        }
        if (auto* resp = std::get_if<wire::Response>(&frame)) {
          file_response(*resp);
        }
      } catch (const Error& e) {
        if (e.code() == "connection-lost") {
          redirect_and_resubmit();
        } else {
          throw;
        }
      }
    }
  }

  void file_response(const wire::Response& resp) {
    for (auto& [ticket, p] : pending_) {
      if (p.wire_id != resp.invocation_id || p.result) continue;
      InvocationResult r;
      r.invocation_id = ticket;
      r.status = resp.status;
      r.payload = resp.payload;
      r.timings = resp.timings;
      p.result = std::move(r);
      return;
    }
  }

  wire::MemResult mem_roundtrip(const wire::MemOp& op) {
    if (spec_.kind != FunctionKind::memory_service) {
      throw Error("invalid-lease", "handle is not a memory-service lease");
    }
    wire::write_frame(conn_, op);
    for (;;) {
      wire::Frame frame;
      if (!wire::read_frame(conn_, frame)) {
        throw Error("connection-lost", "executor closed the channel");
      }
      if (auto* result = std::get_if<wire::MemResult>(&frame)) {
        if (result->status != 0) {
          throw Error(std::string(result->payload.begin(),
                                  result->payload.end()),
                      "memory operation failed");
        }
        return *result;
      }
      if (auto* resp = std::get_if<wire::Response>(&frame)) {
        file_response(*resp);  // async invocation results may interleave
      }
    }
  }

  FunctionSpec spec_;
  manager::RmClient rm_;
  std::string client_id_;
  RetryPolicy retry_;
  Lease lease_;
  net::Socket conn_;
  int64_t connect_ms_ = 0;
  uint64_t next_ticket_id_ = 1;
  uint64_t next_wire_id_ = 1;
  std::map<uint64_t, Pending> pending_;
};

}  // namespace rfaas::client
