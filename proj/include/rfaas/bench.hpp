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
#include <chrono>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "rfaas/client.hpp"
#include "rfaas/executor.hpp"
#include "rfaas/manager_http.hpp"

// Invocation latency microbenchmark over a loopback stack. Cold runs disable
// the warm pool so every invocation pays the sandbox spawn; hot runs use a
// dedicated busy-polled connection; warm runs park between invocations.

namespace rfaas::bench {

enum class Mode { hot, warm, cold };

inline Mode mode_from_string(const std::string& s) {
  if (s == "hot") return Mode::hot;
  if (s == "warm") return Mode::warm;
  if (s == "cold") return Mode::cold;
  throw Error("parse", "unknown bench mode: " + s);
}

struct LatencySample {
  double total_us = 0;
  InvocationTimings timings;
};

struct LatencyRun {
  Mode mode;
  std::vector<LatencySample> samples;

  std::vector<double> totals_us() const {
    std::vector<double> v;
    v.reserve(samples.size());
    for (const auto& s : samples) v.push_back(s.total_us);
    return v;
  }
};

inline double percentile(std::vector<double> v, double p) {
  if (v.empty()) throw Error("empty-sample", "no samples");
  size_t rank = static_cast<size_t>(
      std::max(1.0, std::ceil(p / 100.0 * static_cast<double>(v.size()))));
  rank = std::min(rank, v.size());
  std::nth_element(v.begin(), v.begin() + (rank - 1), v.end());
  return v[rank - 1];
}

// Self-contained harness: a private resource manager and one executor on
// loopback per run.
class LoopbackStack {
 public:
  explicit LoopbackStack(Mode mode, int64_t cores = 8) {
    manager::RmConfig cfg;
    cfg.idle_lease_timeout_s = 0;  // the sweeper has no business here
    rm_ = std::make_unique<manager::ResourceManager>(cfg);
    service_ = std::make_unique<manager::RmService>(*rm_, "127.0.0.1:0");

    endpoint_ = service_->endpoint();

    executor::ExecutorConfig ex;
    ex.node_id = "bench-node";
    ex.rm_endpoint = endpoint_;
    ex.hot_mode = mode == Mode::hot;
    ex.warm_pool_budget_mb = mode == Mode::cold ? 0 : 4096;
    ex.total = {cores, 8192, 0};
    exec_ = std::make_unique<executor::Executor>(ex);
    exec_->start();
  }

  ~LoopbackStack() {
    try {
      exec_->drain(/*immediate=*/true, /*notify_rm=*/false);
    } catch (...) {
    }
  }

  const std::string& rm_endpoint() const { return endpoint_; }
  executor::Executor& exec() { return *exec_; }

 private:
  std::string endpoint_;
  std::unique_ptr<manager::ResourceManager> rm_;
  std::unique_ptr<manager::RmService> service_;
  std::unique_ptr<executor::Executor> exec_;
};

inline LatencyRun run_latency(Mode mode, int n, int warmup = 3) {
  LoopbackStack stack(mode);

  FunctionSpec spec;
  spec.function_id = "noop";
  spec.image_ref = "noop";
  spec.required = {1, 64, 0};
  spec.max_duration_ms = 10'000;

  client::FunctionHandle handle(spec, stack.rm_endpoint(), "bench");
  LatencyRun run{mode, {}};
  run.samples.reserve(static_cast<size_t>(n));

  if (mode != Mode::cold) {
    for (int i = 0; i < warmup; ++i) handle.invoke(std::string{});
  }
  for (int i = 0; i < n; ++i) {
    auto t0 = std::chrono::steady_clock::now();
    auto result = handle.invoke(std::string{});
    auto dt = std::chrono::duration_cast<std::chrono::nanoseconds>(
                  std::chrono::steady_clock::now() - t0)
                  .count();
    if (result.status != InvocationStatus::ok) {
      throw Error("bench-failed", "invocation returned " +
                                      std::to_string(static_cast<int>(
                                          result.status)));
    }
    run.samples.push_back(
        {static_cast<double>(dt) / 1000.0, result.timings});
  }
  handle.close();
  return run;
}

}  // namespace rfaas::bench
