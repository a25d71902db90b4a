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

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <queue>
#include <vector>

#include "rfaas/core.hpp"

// Offload admission model. Remote invocations pay a round-trip latency L and
// an executor service time T_inv; they are worthwhile only when enough local
// work exists to hide that cost. The planner computes the smallest local
// batch N_local with N_local * T_local >= T_inv + L, caps concurrent remote
// work at the bandwidth saturation point N_remote = B / Data_inv, and splits
// independent task sets accordingly.
//
// Units are milliseconds and MB (1 MB = 10^6 bytes) throughout.

namespace rfaas::planner {

struct OffloadParams {
  double t_local_ms = 0;   // per-task local runtime
  double t_inv_ms = 0;     // executor-side service time, incl. function exec
  double l_ms = 0;         // round-trip network latency
  double b_mb_s = 0;       // available bandwidth
  double data_inv_mb = 0;  // payload moved per invocation

  void validate() const {
    if (t_local_ms <= 0) throw Error("invalid-params", "t_local_ms must be > 0");
    if (b_mb_s <= 0) throw Error("invalid-params", "b_mb_s must be > 0");
    if (data_inv_mb <= 0) {
      throw Error("invalid-params", "data_inv_mb must be > 0");
    }
    if (t_inv_ms < 0 || l_ms < 0) {
      throw Error("invalid-params", "t_inv_ms and l_ms must be >= 0");
    }
  }
};

struct PartitionPlan {
  int64_t local_tasks = 0;
  int64_t remote_tasks = 0;
  double expected_makespan_ms = 0;
};

// Medians are robust to the odd outlier sample; service latencies routinely
// have heavy tails.
inline double median(std::vector<double> v) {
  if (v.empty()) throw Error("empty-sample", "median of empty sample list");
  size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + mid, v.end());
  double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  std::nth_element(v.begin(), v.begin() + mid - 1, v.begin() + mid);
  return (v[mid - 1] + hi) / 2.0;
}

inline OffloadParams estimate_params(const std::vector<double>& latency_samples,
                                     const std::vector<double>& bandwidth_samples,
                                     const std::vector<double>& exec_samples) {
  OffloadParams p;
  p.l_ms = median(latency_samples);
  p.b_mb_s = median(bandwidth_samples);
  p.t_inv_ms = median(exec_samples);
  return p;
}

// Smallest non-negative integer N with N * T_local >= T_inv + L. Computed by
// probing around the floating-point quotient with the same inequality a
// brute-force search would use, so the two never disagree on rounding.
inline int64_t min_local_batch(const OffloadParams& p) {
  p.validate();
  double overhead = p.t_inv_ms + p.l_ms;
  if (overhead <= 0) return 0;
  auto satisfies = [&](int64_t n) {
    return static_cast<double>(n) * p.t_local_ms >= overhead;
  };
  int64_t guess = static_cast<int64_t>(std::floor(overhead / p.t_local_ms));
  int64_t n = std::max<int64_t>(0, guess - 2);
  while (!satisfies(n)) ++n;
  return n;
}

// Number of concurrently in-flight tasks that saturates the link: B/Data_inv,
// floored because a fractional task cannot be sent. Zero means offloading is
// infeasible for this payload size.
inline int64_t max_remote_inflight(const OffloadParams& p) {
  if (p.data_inv_mb <= 0) throw Error("zero-payload", "data_inv_mb must be > 0");
  p.validate();
  return static_cast<int64_t>(std::floor(p.b_mb_s / p.data_inv_mb));
}

inline double transfer_ms(const OffloadParams& p) {
  return p.data_inv_mb / p.b_mb_s * 1000.0;
}

inline PartitionPlan partition_work(int64_t total_tasks, const OffloadParams& p) {
  if (total_tasks < 0) throw Error("invalid-params", "negative task count");
  p.validate();
  PartitionPlan plan;
  if (total_tasks == 0) return plan;

  int64_t n_local = min_local_batch(p);
  int64_t n_remote = max_remote_inflight(p);
  if (total_tasks <= n_local || n_remote <= 0) {
    plan.local_tasks = total_tasks;
    plan.expected_makespan_ms = static_cast<double>(total_tasks) * p.t_local_ms;
    return plan;
  }
  plan.remote_tasks = std::min(total_tasks - n_local, n_remote);
  plan.local_tasks = total_tasks - plan.remote_tasks;

  double local_ms = static_cast<double>(plan.local_tasks) * p.t_local_ms;
  double remote_ms = plan.remote_tasks > 0
                         ? p.l_ms + p.t_inv_ms +
                               static_cast<double>(plan.remote_tasks) *
                                   transfer_ms(p)
                         : 0.0;
  plan.expected_makespan_ms = std::max(local_ms, remote_ms);
  return plan;
}

struct SimulatedRun {
  double makespan_ms = 0;
  double local_finish_ms = 0;
  double last_result_ms = 0;    // arrival of the final remote result
  double last_transfer_ms = 0;  // end of the final payload transfer
};

// Event-driven replay of a plan: the local stream executes serially while
// remote tasks keep up to N_remote transfers in flight, each moving
// data_inv_mb at bandwidth B, with the result arriving L + T_inv after the
// transfer completes. Serves as the independent check that plans keep the
// local stream busy past the transfer phase.
inline SimulatedRun simulate_plan(const PartitionPlan& plan,
                                  const OffloadParams& p) {
  p.validate();
  SimulatedRun run;
  run.local_finish_ms = static_cast<double>(plan.local_tasks) * p.t_local_ms;
  run.makespan_ms = run.local_finish_ms;
  if (plan.remote_tasks <= 0) return run;

  int64_t window = std::max<int64_t>(1, max_remote_inflight(p));
  double xfer = transfer_ms(p);

  // Min-heap of in-flight transfer completion times.
  std::priority_queue<double, std::vector<double>, std::greater<>> inflight;
  int64_t sent = 0;
  double clock = 0;
  while (sent < plan.remote_tasks || !inflight.empty()) {
    while (sent < plan.remote_tasks &&
           static_cast<int64_t>(inflight.size()) < window) {
      inflight.push(clock + xfer);
      ++sent;
    }
    clock = inflight.top();
    inflight.pop();
    run.last_transfer_ms = clock;
    double result_at = clock + p.l_ms + p.t_inv_ms;
    run.last_result_ms = std::max(run.last_result_ms, result_at);
  }
  run.makespan_ms = std::max(run.local_finish_ms, run.last_result_ms);
  return run;
}

// The no-wait test: local work must still be running (or just finishing) when
// the last remote transfer completes, so the application never idles for more
// than the final round-trip tail.
inline bool plan_avoids_waiting(const PartitionPlan& plan,
                                const OffloadParams& p) {
  auto run = simulate_plan(plan, p);
  if (plan.remote_tasks <= 0) return true;
  return run.local_finish_ms >= run.last_result_ms - (p.l_ms + p.t_inv_ms);
}

}  // namespace rfaas::planner
