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

#include <doctest.h>

#include <cmath>
#include <memory>
#include <thread>

#include "rfaas/client.hpp"
#include "rfaas/executor.hpp"
#include "rfaas/manager_http.hpp"
#include "rfaas/planner.hpp"

using namespace rfaas;

namespace {

FunctionSpec fn(const std::string& id, int64_t cores = 1,
                int64_t memory_mb = 64, int64_t max_duration_ms = 30'000) {
  FunctionSpec spec;
  spec.function_id = id;
  spec.image_ref = id;
  spec.required = {cores, memory_mb, 0};
  spec.max_duration_ms = max_duration_ms;
  return spec;
}

// One resource manager plus n live executors on loopback.
struct Cluster {
  explicit Cluster(int executors, int64_t cores_per_node = 8,
                   int64_t idle_timeout_s = 0) {
    manager::RmConfig cfg;
    cfg.idle_lease_timeout_s = idle_timeout_s;
    rm = std::make_unique<manager::ResourceManager>(cfg);
    service = std::make_unique<manager::RmService>(*rm, "127.0.0.1:0");
    for (int i = 0; i < executors; ++i) {
      executor::ExecutorConfig ex;
      ex.node_id = "node" + std::to_string(i);
      ex.rm_endpoint = service->endpoint();
      ex.total = {cores_per_node, 16000, 0};
      ex.touch_interval_ms = 500;
      execs.push_back(std::make_unique<executor::Executor>(ex));
      execs.back()->start();
    }
  }

  ~Cluster() {
    for (auto& e : execs) {
      try {
        e->drain(true, false);
      } catch (...) {
      }
    }
  }

  std::string endpoint() const { return service->endpoint(); }

  std::unique_ptr<manager::ResourceManager> rm;
  std::unique_ptr<manager::RmService> service;
  std::vector<std::unique_ptr<executor::Executor>> execs;
};

}  // namespace

TEST_CASE("open binds a lease and a channel") {
  Cluster cluster(1);
  client::FunctionHandle handle(fn("echo"), cluster.endpoint());
  CHECK(handle.lease().lease_id > 0);
  CHECK(handle.lease().node_id == "node0");
  CHECK(handle.connect_ms() >= 0);

  auto result = handle.invoke(std::string("abc"));
  CHECK(result.status == InvocationStatus::ok);
  CHECK(result.payload_str() == "abc");
  handle.close();
}

TEST_CASE("open surfaces manager denials") {
  Cluster cluster(1);

  SUBCASE("no capacity") {
    try {
      client::FunctionHandle handle(fn("echo", 64), cluster.endpoint());
      FAIL("expected no-capacity");
    } catch (const Error& e) {
      CHECK(e.code() == "no-capacity");
    }
  }

  SUBCASE("two opens give two leases") {
    client::FunctionHandle h1(fn("echo"), cluster.endpoint());
    client::FunctionHandle h2(fn("echo"), cluster.endpoint());
    CHECK(h1.lease().lease_id != h2.lease().lease_id);
  }
}

TEST_CASE("application errors pass through without retries") {
  Cluster cluster(1);
  client::FunctionHandle handle(fn("fail"), cluster.endpoint());
  auto result = handle.invoke(std::string("boom"));
  CHECK(result.status == InvocationStatus::error);
  CHECK(result.payload_str().find("boom") != std::string::npos);
  // The lease survives an application error.
  auto again = handle.invoke(std::string("still here"));
  CHECK(again.status == InvocationStatus::error);
}

TEST_CASE("async invocations complete out of band") {
  Cluster cluster(1);
  client::FunctionHandle handle(fn("echo"), cluster.endpoint());

  std::vector<client::Ticket> tickets;
  for (int i = 0; i < 8; ++i) {
    tickets.push_back(handle.invoke_async(
        std::vector<uint8_t>{static_cast<uint8_t>('0' + i)}));
  }
  std::map<uint64_t, std::string> results;
  while (results.size() < tickets.size()) {
    for (const auto& t : tickets) {
      if (results.count(t.id)) continue;
      if (auto r = handle.poll(t)) {
        CHECK(r->status == InvocationStatus::ok);
        CHECK(r->invocation_id == t.id);
        results[t.id] = r->payload_str();
      }
    }
  }
  for (size_t i = 0; i < tickets.size(); ++i) {
    CHECK(results[tickets[i].id] == std::string(1, '0' + i));
  }

  SUBCASE("consumed tickets go stale") {
    auto t = handle.invoke_async({'x'});
    for (;;) {
      if (auto r = handle.poll(t)) break;
    }
    CHECK_THROWS_AS(handle.poll(t), Error);
  }
}

TEST_CASE("async submissions overlap local work") {
  Cluster cluster(1);
  client::FunctionHandle handle(fn("sleep"), cluster.endpoint());
  handle.invoke(std::string("1"));  // absorb the cold start

  // Sequential baseline: 4 sleeps of 300 ms plus 1200 ms local work.
  int64_t t0 = now_ms();
  std::vector<client::Ticket> tickets;
  for (int i = 0; i < 4; ++i) {
    tickets.push_back(handle.invoke_async(
        std::vector<uint8_t>{'3', '0', '0'}));
  }
  std::this_thread::sleep_for(std::chrono::milliseconds(1200));  // local task
  for (const auto& t : tickets) {
    for (;;) {
      if (auto r = handle.poll(t)) {
        CHECK(r->status == InvocationStatus::ok);
        break;
      }
    }
  }
  int64_t wall = now_ms() - t0;
  CHECK(wall < 2400);  // sequential sum would be 4*300 + 1200
}

TEST_CASE("terminated leases redirect to surviving nodes") {
  Cluster cluster(2);
  client::FunctionHandle handle(fn("sleep", 1, 64, 60'000),
                                cluster.endpoint());
  std::string first_node = handle.lease().node_id;

  // Kill the serving node mid-invocation; the RM drains it and the client
  // must land on the other node and retry transparently.
  std::thread drainer([&] {
    std::this_thread::sleep_for(std::chrono::milliseconds(300));
    manager::RmClient rm(cluster.endpoint());
    rm.remove_node(first_node, /*immediate=*/true);
  });
  auto result = handle.invoke(std::string("2000"));
  drainer.join();

  CHECK(result.status == InvocationStatus::ok);
  CHECK(handle.lease().node_id != first_node);
}

TEST_CASE("redirect exhausts when no capacity remains") {
  Cluster cluster(1);
  client::RetryPolicy retry;
  retry.max_releases = 2;
  retry.backoff_ms = 10;
  client::FunctionHandle handle(fn("sleep", 1, 64, 60'000),
                                cluster.endpoint(), "client", retry);

  std::thread drainer([&] {
    std::this_thread::sleep_for(std::chrono::milliseconds(200));
    manager::RmClient rm(cluster.endpoint());
    rm.remove_node("node0", /*immediate=*/true);
  });
  CHECK_THROWS_AS(handle.invoke(std::string("5000")), Error);
  drainer.join();
}

TEST_CASE("graceful drain rejections redirect to the next node") {
  Cluster cluster(2);

  // Occupy node0 with a slow invocation so its drain stays open.
  client::FunctionHandle slow(fn("sleep", 1, 64, 10'000), cluster.endpoint());
  CHECK(slow.lease().node_id == "node0");
  auto slow_ticket = slow.invoke_async({'1', '2', '0', '0'});

  std::thread drainer([&] {
    std::this_thread::sleep_for(std::chrono::milliseconds(150));
    manager::RmClient rm(cluster.endpoint());
    rm.remove_node("node0", /*immediate=*/false);
  });

  // A second handle still bound to node0 sees "draining" on its next
  // invocation and follows the redirect.
  client::FunctionHandle other(fn("echo"), cluster.endpoint());
  std::this_thread::sleep_for(std::chrono::milliseconds(400));
  auto result = other.invoke(std::string("hi"));
  CHECK(result.status == InvocationStatus::ok);
  CHECK(other.lease().node_id == "node1");

  for (;;) {
    if (auto r = slow.poll(slow_ticket)) {
      CHECK(r->status == InvocationStatus::ok);  // graceful: ran to the end
      break;
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
  drainer.join();
}

TEST_CASE("idle leases expire and the next invocation re-acquires") {
  Cluster cluster(1, 8, /*idle_timeout_s=*/1);
  client::FunctionHandle handle(fn("echo"), cluster.endpoint());
  auto first = handle.invoke(std::string("a"));
  CHECK(first.status == InvocationStatus::ok);
  uint64_t lease_before = handle.lease().lease_id;

  // Sit idle past the timeout; the sweeper reclaims the lease.
  std::this_thread::sleep_for(std::chrono::milliseconds(2600));
  auto second = handle.invoke(std::string("b"));
  CHECK(second.status == InvocationStatus::ok);
  CHECK(handle.lease().lease_id != lease_before);
}

TEST_CASE("parameter estimation is repeatable on a live loopback stack") {
  Cluster cluster(1);
  client::FunctionHandle noop(fn("noop"), cluster.endpoint());
  client::FunctionHandle echo(fn("echo"), cluster.endpoint());
  for (int i = 0; i < 50; ++i) noop.invoke(std::string{});
  echo.invoke(std::string{});

  auto measure = [&] {
    std::vector<double> latency_ms, bandwidth_mb_s, exec_ms;
    for (int i = 0; i < 200; ++i) {
      auto t0 = std::chrono::steady_clock::now();
      noop.invoke(std::string{});
      latency_ms.push_back(std::chrono::duration<double, std::milli>(
                               std::chrono::steady_clock::now() - t0)
                               .count());
    }
    std::vector<uint8_t> chunk(1'000'000, 0x42);  // 1 MB each way
    for (int i = 0; i < 20; ++i) {
      auto t0 = std::chrono::steady_clock::now();
      echo.invoke(chunk);
      double s = std::chrono::duration<double>(
                     std::chrono::steady_clock::now() - t0)
                     .count();
      bandwidth_mb_s.push_back(2.0 / s);
    }
    for (int i = 0; i < 200; ++i) {
      auto t0 = std::chrono::steady_clock::now();
      echo.invoke(std::string("payload"));
      exec_ms.push_back(std::chrono::duration<double, std::milli>(
                            std::chrono::steady_clock::now() - t0)
                            .count());
    }
    return planner::estimate_params(latency_ms, bandwidth_mb_s, exec_ms);
  };

  auto first = measure();
  auto second = measure();
  CHECK(first.l_ms > 0);
  CHECK(first.b_mb_s > 0);
  // Medians from repeated runs agree within +/-20%.
  CHECK(std::abs(first.l_ms - second.l_ms) <=
        0.2 * std::max(first.l_ms, second.l_ms));
  CHECK(std::abs(first.b_mb_s - second.b_mb_s) <=
        0.2 * std::max(first.b_mb_s, second.b_mb_s));
  CHECK(std::abs(first.t_inv_ms - second.t_inv_ms) <=
        0.2 * std::max(first.t_inv_ms, second.t_inv_ms));
}

TEST_CASE("memory-service handles bind blocks to the lease") {
  Cluster cluster(1);
  auto spec = fn("cache", 1, 128);
  spec.kind = FunctionKind::memory_service;
  client::FunctionHandle handle(spec, cluster.endpoint());

  uint64_t block = handle.mem_alloc(1 << 20);
  std::vector<uint8_t> payload{'x', 'y', 'z'};
  handle.mem_put(block, 0, payload);
  CHECK(handle.mem_get(block, 0, 3) == payload);

  auto swap_path = handle.mem_reclaim(block);
  CHECK_FALSE(swap_path.empty());
  CHECK(handle.mem_get(block, 0, 3) == payload);  // transparent restore

  SUBCASE("closing the lease kills the block") {
    manager::RmClient rm(cluster.endpoint());
    rm.release_lease(handle.lease().lease_id);
    std::this_thread::sleep_for(std::chrono::milliseconds(100));
    try {
      handle.mem_get(block, 0, 3);
      FAIL("expected terminated-lease");
    } catch (const Error& e) {
      CHECK(e.code() == "terminated-lease");
    }
  }
}
