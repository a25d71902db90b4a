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
#include <cstdlib>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "rfaas/core.hpp"
#include "rfaas/json_codec.hpp"
#include "rfaas/net.hpp"
#include "rfaas/policy.hpp"
#include "rfaas/wire.hpp"

// Central service owning the node inventory and lease table. Nodes join with
// one REST call and are eligible for placement immediately; a remove call
// drains them back to the batch system. Every resource dimension of a lease
// is billed independently for its active time.

namespace rfaas::manager {

enum class NodeSharing { opt_in, exclusive };

inline std::string to_string(NodeSharing s) {
  return s == NodeSharing::opt_in ? "opt_in" : "exclusive";
}

inline NodeSharing sharing_from_string(const std::string& s) {
  if (s == "opt_in") return NodeSharing::opt_in;
  if (s == "exclusive") return NodeSharing::exclusive;
  throw Error("malformed", "unknown sharing mode: " + s);
}

enum class NodeLifecycle { available, draining, removed };

inline std::string to_string(NodeLifecycle s) {
  switch (s) {
    case NodeLifecycle::available: return "available";
    case NodeLifecycle::draining: return "draining";
    case NodeLifecycle::removed: return "removed";
  }
  return "?";
}

struct NodeDescriptor {
  std::string node_id;
  ResourceVector total;
  int64_t reserved_serving_cores = 1;  // cores kept free to serve invocations
  std::optional<int64_t> availability_hint_s;
  NodeSharing sharing = NodeSharing::opt_in;
  std::string endpoint;  // executor host:port; empty for passive inventory
  std::optional<policy::JobDescriptor> job;  // batch job already on the node
};

struct NodeRecord {
  std::string node_id;
  ResourceVector total;
  ResourceVector leased;
  std::set<std::string> warm_images;
  int64_t reserved_serving_cores = 1;
  std::optional<int64_t> availability_hint_s;
  NodeSharing sharing = NodeSharing::opt_in;
  NodeLifecycle state = NodeLifecycle::available;
  std::string endpoint;
};

struct UsageLedgerEntry {
  uint64_t lease_id = 0;
  int64_t core_ms = 0;
  int64_t memory_mb_ms = 0;
  int64_t gpu_ms = 0;
};

struct DrainOutcome {
  uint64_t aborted = 0;
  uint64_t completed = 0;
};

struct RmConfig {
  int64_t idle_lease_timeout_s = 300;
  int64_t drain_wait_s = 600;  // upper bound on a graceful drain reply
  policy::PolicyConfig policy;
  bool journal = false;  // record an op journal for replay checks

  static RmConfig from_env() {
    RmConfig cfg;
    if (const char* v = std::getenv("RM_IDLE_LEASE_TIMEOUT_S")) {
      cfg.idle_lease_timeout_s = std::strtoll(v, nullptr, 10);
    }
    cfg.policy = policy::PolicyConfig::from_env();
    return cfg;
  }
};

// One linearized acquire/release event; the concurrency tests replay the
// journal against a sequential model.
struct JournalEntry {
  enum Kind { acquire, release } kind;
  std::string node_id;
  ResourceVector resources;
};

class ResourceManager {
 public:
  explicit ResourceManager(RmConfig config = {},
                           policy::HistoryStore* history = nullptr,
                           std::function<int64_t()> clock = now_ms)
      : cfg_(config), history_(history), clock_(std::move(clock)) {}

  std::string register_node(const NodeDescriptor& desc) {
    if (desc.node_id.empty()) throw Error("malformed", "empty node_id");
    if (!desc.total.valid() || desc.total.zero()) {
      throw Error("malformed", "node must bring at least one resource");
    }
    if (desc.reserved_serving_cores < 0 ||
        desc.reserved_serving_cores > desc.total.cores) {
      throw Error("malformed", "reserved_serving_cores out of range");
    }
    std::lock_guard lock(mu_);
    auto it = nodes_.find(desc.node_id);
    if (it != nodes_.end() && it->second.state != NodeLifecycle::removed) {
      throw Error("duplicate-node", desc.node_id + " already registered");
    }
    Node node;
    node.desc = desc;
    node.state = NodeLifecycle::available;
    node.registered_at = clock_();
    nodes_[desc.node_id] = std::move(node);
    return desc.node_id;
  }

  Lease acquire_lease(const FunctionSpec& spec, const std::string& client_id) {
    spec.validate();
    std::set<std::string> skip;
    while (true) {
      std::string reason;         // first policy denial seen
      std::string chosen;
      Lease lease;
      {
        std::lock_guard lock(mu_);
        chosen = pick_node_locked(spec, skip, reason);
        if (!chosen.empty()) lease = grant_locked(chosen, spec, client_id);
      }
      if (chosen.empty()) {
        if (!reason.empty()) throw Error("policy-denied", reason);
        throw Error("no-capacity", "no eligible node for " + spec.function_id);
      }
      if (push_grant(lease, spec, client_id)) return lease;
      // Executor unreachable: roll back and look elsewhere.
      rollback_lease(lease.lease_id);
      skip.insert(chosen);
    }
  }

  UsageLedgerEntry release_lease(uint64_t lease_id) {
    UsageLedgerEntry entry;
    std::string endpoint;
    {
      std::lock_guard lock(mu_);
      entry = close_lease_locked(lease_id, &endpoint);
    }
    push_revoke(endpoint, lease_id, /*terminated=*/false);
    return entry;
  }

  DrainOutcome remove_node(const std::string& node_id, bool immediate,
                           std::optional<int64_t> deadline_s = std::nullopt) {
    std::string endpoint;
    {
      std::lock_guard lock(mu_);
      auto it = nodes_.find(node_id);
      if (it == nodes_.end() || it->second.state == NodeLifecycle::removed) {
        throw Error("unknown-node", node_id);
      }
      if (it->second.state != NodeLifecycle::available) {
        throw Error("not-available", node_id + " is already draining");
      }
      it->second.state = NodeLifecycle::draining;
      endpoint = it->second.desc.endpoint;
    }

    DrainOutcome outcome = drain_executor(endpoint, immediate, deadline_s);

    std::lock_guard lock(mu_);
    auto& node = nodes_.at(node_id);
    for (auto& [id, lease] : leases_) {
      if (lease.lease.node_id != node_id) continue;
      if (lease.lease.state == LeaseState::active ||
          lease.lease.state == LeaseState::draining) {
        finalize_lease_locked(lease);
      }
    }
    node.desc.job.reset();
    node.warm_images.clear();
    node.state = NodeLifecycle::removed;
    return outcome;
  }

  std::vector<NodeRecord> list_nodes() const {
    std::lock_guard lock(mu_);
    std::vector<NodeRecord> out;
    for (const auto& [id, node] : nodes_) {
      if (node.state == NodeLifecycle::removed) continue;
      out.push_back(snapshot_locked(node));
    }
    return out;
  }

  void touch_lease(uint64_t lease_id) {
    std::lock_guard lock(mu_);
    auto it = leases_.find(lease_id);
    if (it == leases_.end()) throw Error("unknown-lease", std::to_string(lease_id));
    it->second.last_activity = clock_();
  }

  // Expires leases that have seen no invocations for the idle timeout.
  // Returns the number of leases reclaimed.
  size_t expire_idle_leases() {
    std::vector<std::pair<uint64_t, std::string>> expired;
    {
      std::lock_guard lock(mu_);
      int64_t now = clock_();
      for (auto& [id, lease] : leases_) {
        if (lease.lease.state != LeaseState::active) continue;
        if (now - lease.last_activity >= cfg_.idle_lease_timeout_s * 1000) {
          std::string endpoint = endpoint_of_locked(lease.lease.node_id);
          finalize_lease_locked(lease);
          expired.emplace_back(id, endpoint);
        }
      }
    }
    for (const auto& [id, endpoint] : expired) {
      push_revoke(endpoint, id, /*terminated=*/true);
    }
    return expired.size();
  }

  std::optional<UsageLedgerEntry> final_ledger(uint64_t lease_id) const {
    std::lock_guard lock(mu_);
    auto it = leases_.find(lease_id);
    if (it == leases_.end() || it->second.lease.state != LeaseState::terminated) {
      return std::nullopt;
    }
    return it->second.final_entry;
  }

  std::vector<JournalEntry> journal() const {
    std::lock_guard lock(mu_);
    return journal_;
  }

  const RmConfig& config() const { return cfg_; }

 private:
  struct Node {
    NodeDescriptor desc;
    ResourceVector leased;
    std::set<std::string> warm_images;
    NodeLifecycle state = NodeLifecycle::available;
    int64_t registered_at = 0;
  };

  struct LeaseEntry {
    Lease lease;
    std::string client_id;
    std::string image_ref;
    FunctionKind kind = FunctionKind::compute;
    int64_t max_duration_ms = 0;
    int64_t activated_at = 0;
    int64_t last_activity = 0;
    bool released = false;  // terminal ledger already handed out once
    UsageLedgerEntry final_entry;
  };

  NodeRecord snapshot_locked(const Node& node) const {
    NodeRecord rec;
    rec.node_id = node.desc.node_id;
    rec.total = node.desc.total;
    rec.leased = node.leased;
    rec.warm_images = node.warm_images;
    rec.reserved_serving_cores = node.desc.reserved_serving_cores;
    rec.availability_hint_s = node.desc.availability_hint_s;
    rec.sharing = node.desc.sharing;
    rec.state = node.state;
    rec.endpoint = node.desc.endpoint;
    return rec;
  }

  std::string endpoint_of_locked(const std::string& node_id) const {
    auto it = nodes_.find(node_id);
    return it == nodes_.end() ? "" : it->second.desc.endpoint;
  }

  // Placement: warm image first, then the longest remaining availability
  // hint (absent hint sorts as unbounded), then lowest node id. Deterministic
  // for a fixed inventory.
  std::string pick_node_locked(const FunctionSpec& spec,
                               const std::set<std::string>& skip,
                               std::string& policy_reason) {
    std::string best;
    bool best_warm = false;
    int64_t best_hint = -1;
    for (const auto& [id, node] : nodes_) {
      if (skip.count(id)) continue;
      if (node.state != NodeLifecycle::available) continue;
      if (node.desc.sharing != NodeSharing::opt_in) continue;
      auto free = rv_try_sub(node.desc.total, node.leased);
      if (!free) continue;
      ResourceVector allocatable = *free;
      allocatable.cores = std::max<int64_t>(
          0, allocatable.cores - node.desc.reserved_serving_cores);
      if (!rv_fits(allocatable, spec.required)) continue;

      static const policy::HistoryStore empty_history;
      const auto& history = history_ ? *history_ : empty_history;
      policy::NodeView view{node.desc.total, node.leased};
      auto decision = policy::decide_colocation(view, node.desc.job, spec,
                                                std::nullopt, history,
                                                cfg_.policy);
      if (!decision.allowed) {
        // Capacity denials are indistinguishable from plain full nodes;
        // anything else is a policy verdict worth surfacing.
        if (decision.reason != "no-capacity" && policy_reason.empty()) {
          policy_reason = decision.reason;
        }
        continue;
      }

      bool warm = node.warm_images.count(spec.image_ref) > 0;
      int64_t hint = INT64_MAX;
      if (node.desc.availability_hint_s) {
        int64_t elapsed_s = (clock_() - node.registered_at) / 1000;
        hint = *node.desc.availability_hint_s - elapsed_s;
      }
      bool better = best.empty();
      if (!better) {
        if (warm != best_warm) {
          better = warm;
        } else if (hint != best_hint) {
          better = hint > best_hint;
        }
      }
      if (better) {
        best = id;
        best_warm = warm;
        best_hint = hint;
      }
    }
    return best;
  }

  Lease grant_locked(const std::string& node_id, const FunctionSpec& spec,
                     const std::string& client_id) {
    Node& node = nodes_.at(node_id);
    LeaseEntry entry;
    entry.lease.lease_id = next_lease_id_++;
    entry.lease.node_id = node_id;
    entry.lease.function_id = spec.function_id;
    entry.lease.resources = spec.required;
    entry.lease.created_at = clock_();
    entry.lease.endpoint = node.desc.endpoint.empty() ? "-" : node.desc.endpoint;
    entry.lease.transition(LeaseState::active);
    entry.client_id = client_id;
    entry.image_ref = spec.image_ref;
    entry.kind = spec.kind;
    entry.max_duration_ms = spec.max_duration_ms;
    entry.activated_at = clock_();
    entry.last_activity = entry.activated_at;

    node.leased = rv_add(node.leased, spec.required);
    node.warm_images.insert(spec.image_ref);
    if (cfg_.journal) {
      journal_.push_back({JournalEntry::acquire, node_id, spec.required});
    }
    Lease lease = entry.lease;
    leases_[entry.lease.lease_id] = std::move(entry);
    return lease;
  }

  void rollback_lease(uint64_t lease_id) {
    std::lock_guard lock(mu_);
    auto it = leases_.find(lease_id);
    if (it == leases_.end()) return;
    auto& node = nodes_.at(it->second.lease.node_id);
    node.leased = rv_sub(node.leased, it->second.lease.resources);
    if (cfg_.journal) {
      journal_.push_back({JournalEntry::release, it->second.lease.node_id,
                          it->second.lease.resources});
    }
    leases_.erase(it);
  }

  // Billing: each dimension accumulates independently as dimension x active
  // time, so resizing one dimension never changes another's charge.
  void finalize_lease_locked(LeaseEntry& entry) {
    int64_t active_ms = clock_() - entry.activated_at;
    entry.final_entry.lease_id = entry.lease.lease_id;
    entry.final_entry.core_ms = entry.lease.resources.cores * active_ms;
    entry.final_entry.memory_mb_ms = entry.lease.resources.memory_mb * active_ms;
    entry.final_entry.gpu_ms = entry.lease.resources.gpus * active_ms;
    entry.lease.transition(LeaseState::terminated);
    entry.lease.terminated_at = clock_();
    auto node_it = nodes_.find(entry.lease.node_id);
    if (node_it != nodes_.end()) {
      node_it->second.leased =
          rv_sub(node_it->second.leased, entry.lease.resources);
    }
    if (cfg_.journal) {
      journal_.push_back({JournalEntry::release, entry.lease.node_id,
                          entry.lease.resources});
    }
  }

  UsageLedgerEntry close_lease_locked(uint64_t lease_id, std::string* endpoint) {
    auto it = leases_.find(lease_id);
    if (it == leases_.end()) throw Error("unknown-lease", std::to_string(lease_id));
    LeaseEntry& entry = it->second;
    if (entry.lease.state == LeaseState::terminated) {
      if (entry.released) {
        throw Error("double-release",
                    "lease " + std::to_string(lease_id) + " already released");
      }
      // Terminated by drain or idle expiry before the client released it:
      // hand out the final ledger once.
      entry.released = true;
      return entry.final_entry;
    }
    *endpoint = endpoint_of_locked(entry.lease.node_id);
    finalize_lease_locked(entry);
    entry.released = true;
    return entry.final_entry;
  }

  bool push_grant(const Lease& lease, const FunctionSpec& spec,
                  const std::string& client_id) {
    std::string endpoint;
    {
      std::lock_guard lock(mu_);
      endpoint = endpoint_of_locked(lease.node_id);
    }
    if (endpoint.empty()) return true;  // passive node (tests, simulator feed)
    try {
      auto sock = net::connect_tcp(endpoint);
      wire::LeaseGrant grant;
      grant.lease_id = lease.lease_id;
      grant.client_id = client_id;
      grant.function_id = spec.function_id;
      grant.image_ref = spec.image_ref;
      grant.kind = static_cast<uint8_t>(spec.kind);
      grant.cores = static_cast<uint32_t>(spec.required.cores);
      grant.memory_mb = static_cast<uint64_t>(spec.required.memory_mb);
      grant.gpus = static_cast<uint32_t>(spec.required.gpus);
      grant.max_duration_ms = static_cast<uint32_t>(spec.max_duration_ms);
      wire::write_frame(sock, grant);
      wire::Frame reply;
      if (!wire::read_frame(sock, reply)) return false;
      auto* ack = std::get_if<wire::Ack>(&reply);
      return ack != nullptr && ack->status == 0;
    } catch (const Error&) {
      return false;
    }
  }

  void push_revoke(const std::string& endpoint, uint64_t lease_id,
                   bool terminated) {
    if (endpoint.empty()) return;
    try {
      auto sock = net::connect_tcp(endpoint);
      wire::write_frame(sock, wire::LeaseRevoke{lease_id,
                                                terminated ? uint8_t{1}
                                                           : uint8_t{0}});
      wire::Frame reply;
      wire::read_frame(sock, reply);
    } catch (const Error&) {
      // Executor gone; the lease is already closed on our side.
    }
  }

  DrainOutcome drain_executor(const std::string& endpoint, bool immediate,
                              std::optional<int64_t> deadline_s) {
    if (endpoint.empty()) return {};
    auto send_drain = [&](uint8_t mode,
                          int64_t wait_ms) -> std::optional<DrainOutcome> {
      try {
        auto sock = net::connect_tcp(endpoint);
        wire::write_frame(sock, wire::Drain{mode});
        if (!sock.wait_readable(static_cast<int>(wait_ms))) return std::nullopt;
        wire::Frame reply;
        if (!wire::read_frame(sock, reply)) return std::nullopt;
        if (auto* report = std::get_if<wire::DrainReport>(&reply)) {
          return DrainOutcome{report->aborted, report->completed};
        }
        return std::nullopt;
      } catch (const Error&) {
        // Unreachable executors count as already drained.
        return DrainOutcome{};
      }
    };

    if (immediate) {
      return send_drain(1, 30'000).value_or(DrainOutcome{});
    }
    int64_t wait_ms = (deadline_s ? *deadline_s : cfg_.drain_wait_s) * 1000;
    auto outcome = send_drain(0, wait_ms);
    if (outcome) return *outcome;
    // Graceful drain missed its deadline: escalate to immediate.
    return send_drain(1, 30'000).value_or(DrainOutcome{});
  }

  RmConfig cfg_;
  policy::HistoryStore* history_;
  std::function<int64_t()> clock_;
  mutable std::mutex mu_;
  std::map<std::string, Node> nodes_;
  std::map<uint64_t, LeaseEntry> leases_;
  std::vector<JournalEntry> journal_;
  uint64_t next_lease_id_ = 1;
};

// ---------------------------------------------------------------------------
// JSON mapping for the REST surface
// ---------------------------------------------------------------------------

inline void to_json(nlohmann::json& j, const NodeRecord& r) {
  j = {{"node_id", r.node_id},
       {"total", r.total},
       {"leased", r.leased},
       {"warm_images", r.warm_images},
       {"reserved_serving_cores", r.reserved_serving_cores},
       {"sharing", to_string(r.sharing)},
       {"state", to_string(r.state)}};
  if (r.availability_hint_s) j["availability_hint_s"] = *r.availability_hint_s;
  if (!r.endpoint.empty()) j["endpoint"] = r.endpoint;
}

inline void from_json(const nlohmann::json& j, NodeRecord& r) {
  j.at("node_id").get_to(r.node_id);
  j.at("total").get_to(r.total);
  j.at("leased").get_to(r.leased);
  if (j.contains("warm_images")) {
    for (const auto& img : j.at("warm_images")) {
      r.warm_images.insert(img.get<std::string>());
    }
  }
  r.reserved_serving_cores = j.value("reserved_serving_cores", int64_t{1});
  if (j.contains("availability_hint_s")) {
    r.availability_hint_s = j.at("availability_hint_s").get<int64_t>();
  }
  r.sharing = sharing_from_string(j.value("sharing", std::string("opt_in")));
  std::string state = j.value("state", std::string("available"));
  r.state = state == "available"  ? NodeLifecycle::available
            : state == "draining" ? NodeLifecycle::draining
                                  : NodeLifecycle::removed;
  r.endpoint = j.value("endpoint", std::string{});
}

inline NodeDescriptor node_descriptor_from_json(const nlohmann::json& j) {
  NodeDescriptor d;
  if (!j.contains("node_id") || !j.contains("total")) {
    throw Error("malformed", "registration needs node_id and total");
  }
  j.at("node_id").get_to(d.node_id);
  j.at("total").get_to(d.total);
  d.reserved_serving_cores = j.value("reserved_serving_cores", int64_t{1});
  if (j.contains("availability_hint_s") &&
      !j.at("availability_hint_s").is_null()) {
    d.availability_hint_s = j.at("availability_hint_s").get<int64_t>();
  }
  d.sharing = sharing_from_string(j.value("sharing", std::string("opt_in")));
  d.endpoint = j.value("endpoint", std::string{});
  if (j.contains("job") && !j.at("job").is_null()) {
    policy::JobDescriptor job;
    j.at("job").get_to(job);
    d.job = job;
  }
  return d;
}

}  // namespace rfaas::manager
