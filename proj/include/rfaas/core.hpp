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
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace rfaas {

// Error with a stable machine-readable code. The code is what API layers
// (REST bodies, wire replies) carry; the message is for humans.
class Error : public std::runtime_error {
 public:
  Error(std::string code, std::string message)
      : std::runtime_error(message), code_(std::move(code)) {}
  explicit Error(std::string code) : std::runtime_error(code), code_(code) {}

  const std::string& code() const { return code_; }

 private:
  std::string code_;
};

inline int64_t now_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

// Monotonic clock hook; services take one so tests can drive virtual time.
using ClockFn = int64_t (*)();

// Counted cores, memory (MB) and GPU devices. The unit of allocation,
// accounting and oversubscription checks. Whole devices and whole MB only;
// batch systems do not sub-divide cores.
struct ResourceVector {
  int64_t cores = 0;
  int64_t memory_mb = 0;
  int64_t gpus = 0;

  bool operator==(const ResourceVector&) const = default;

  bool valid() const { return cores >= 0 && memory_mb >= 0 && gpus >= 0; }
  bool zero() const { return cores == 0 && memory_mb == 0 && gpus == 0; }
};

// Component-wise "req fits into avail".
inline bool rv_fits(const ResourceVector& avail, const ResourceVector& req) {
  return req.cores <= avail.cores && req.memory_mb <= avail.memory_mb &&
         req.gpus <= avail.gpus;
}

// Checked component-wise difference; underflow on any negative component.
inline ResourceVector rv_sub(const ResourceVector& a, const ResourceVector& b) {
  if (!rv_fits(a, b)) {
    throw Error("underflow", "resource subtraction would go negative");
  }
  return {a.cores - b.cores, a.memory_mb - b.memory_mb, a.gpus - b.gpus};
}

// Non-throwing variant used in placement scans.
inline std::optional<ResourceVector> rv_try_sub(const ResourceVector& a,
                                                const ResourceVector& b) {
  if (!rv_fits(a, b)) return std::nullopt;
  return ResourceVector{a.cores - b.cores, a.memory_mb - b.memory_mb,
                        a.gpus - b.gpus};
}

inline ResourceVector rv_add(const ResourceVector& a, const ResourceVector& b) {
  return {a.cores + b.cores, a.memory_mb + b.memory_mb, a.gpus + b.gpus};
}

// Canonical textual encoding used in config files and CLI flags:
// cores=<n>,memory_mb=<n>,gpus=<n>
inline std::string rv_format(const ResourceVector& rv) {
  return "cores=" + std::to_string(rv.cores) +
         ",memory_mb=" + std::to_string(rv.memory_mb) +
         ",gpus=" + std::to_string(rv.gpus);
}

inline ResourceVector rv_parse(const std::string& text) {
  ResourceVector rv;
  bool have_cores = false, have_mem = false, have_gpus = false;
  size_t pos = 0;
  while (pos < text.size()) {
    size_t comma = text.find(',', pos);
    if (comma == std::string::npos) comma = text.size();
    std::string field = text.substr(pos, comma - pos);
    size_t eq = field.find('=');
    if (eq == std::string::npos) {
      throw Error("parse", "bad resource field: " + field);
    }
    std::string key = field.substr(0, eq);
    int64_t value = 0;
    try {
      value = std::stoll(field.substr(eq + 1));
    } catch (const std::exception&) {
      throw Error("parse", "bad resource value: " + field);
    }
    if (value < 0) throw Error("parse", "negative resource: " + field);
    if (key == "cores") {
      rv.cores = value;
      have_cores = true;
    } else if (key == "memory_mb") {
      rv.memory_mb = value;
      have_mem = true;
    } else if (key == "gpus") {
      rv.gpus = value;
      have_gpus = true;
    } else {
      throw Error("parse", "unknown resource key: " + key);
    }
    pos = comma + 1;
  }
  if (!have_cores || !have_mem || !have_gpus) {
    throw Error("parse", "resource vector needs cores, memory_mb and gpus");
  }
  return rv;
}

enum class FunctionKind { compute, memory_service };

inline std::string to_string(FunctionKind k) {
  return k == FunctionKind::compute ? "compute" : "memory_service";
}

inline FunctionKind function_kind_from_string(const std::string& s) {
  if (s == "compute") return FunctionKind::compute;
  if (s == "memory_service") return FunctionKind::memory_service;
  throw Error("parse", "unknown function kind: " + s);
}

struct FunctionSpec {
  std::string function_id;
  std::string image_ref;
  ResourceVector required;
  int64_t max_duration_ms = 0;
  FunctionKind kind = FunctionKind::compute;

  // Functions are time-limited and need at least one core to run (or to
  // manage access, for the memory-service kind).
  void validate() const {
    if (function_id.empty()) throw Error("malformed", "empty function_id");
    if (image_ref.empty()) throw Error("malformed", "empty image_ref");
    if (!required.valid()) throw Error("malformed", "negative resources");
    if (max_duration_ms <= 0) {
      throw Error("malformed", "max_duration_ms must be positive");
    }
    if (required.cores < 1) {
      throw Error("malformed", "functions require at least one core");
    }
  }
};

enum class LeaseState { pending, active, draining, terminated };

inline std::string to_string(LeaseState s) {
  switch (s) {
    case LeaseState::pending: return "pending";
    case LeaseState::active: return "active";
    case LeaseState::draining: return "draining";
    case LeaseState::terminated: return "terminated";
  }
  return "?";
}

// Temporary grant of resources on one node to one client for one function
// image. State machine: pending -> active -> {draining -> terminated,
// terminated}.
struct Lease {
  uint64_t lease_id = 0;
  std::string node_id;
  std::string function_id;
  ResourceVector resources;
  LeaseState state = LeaseState::pending;
  std::string endpoint;  // host:port of the serving executor
  int64_t created_at = 0;
  int64_t terminated_at = 0;

  void transition(LeaseState to) {
    bool ok = false;
    switch (state) {
      case LeaseState::pending:
        ok = to == LeaseState::active;
        break;
      case LeaseState::active:
        ok = to == LeaseState::draining || to == LeaseState::terminated;
        break;
      case LeaseState::draining:
        ok = to == LeaseState::terminated;
        break;
      case LeaseState::terminated:
        ok = false;
        break;
    }
    if (!ok) {
      throw Error("illegal-transition",
                  "lease " + std::to_string(lease_id) + ": " +
                      to_string(state) + " -> " + to_string(to));
    }
    if (to == LeaseState::active && endpoint.empty()) {
      throw Error("illegal-transition", "lease activated without endpoint");
    }
    state = to;
  }
};

struct Invocation {
  uint64_t invocation_id = 0;
  uint64_t lease_id = 0;
  std::vector<uint8_t> payload;
  int64_t submitted_at = 0;
};

enum class InvocationStatus : uint8_t { ok = 0, error = 1, terminated = 2 };

struct InvocationTimings {
  uint32_t queue_ms = 0;
  uint32_t sandbox_ms = 0;  // > 0 iff the invocation triggered a cold start
  uint32_t exec_ms = 0;
};

struct InvocationResult {
  uint64_t invocation_id = 0;
  InvocationStatus status = InvocationStatus::ok;
  std::vector<uint8_t> payload;
  InvocationTimings timings;

  std::string payload_str() const {
    return std::string(payload.begin(), payload.end());
  }
};

}  // namespace rfaas
