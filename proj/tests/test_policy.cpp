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

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <random>

#include "rfaas/policy.hpp"

using namespace rfaas;
using namespace rfaas::policy;

namespace {

WorkloadSignature sig(const std::string& app, int64_t scale = 1) {
  return {app, scale, ""};
}

ColocationRecord record(const std::string& batch, const std::string& func,
                        int64_t exclusive_ms, int64_t colocated_ms,
                        int64_t func_scale = 1) {
  ColocationRecord rec;
  rec.batch_sig = sig(batch);
  rec.func_sig = sig(func, func_scale);
  rec.exclusive_runtime_ms = exclusive_ms;
  rec.colocated_runtime_ms = colocated_ms;
  return rec;
}

CounterSample sample(double cpu, double mem, double net) {
  return {cpu, mem, net, 0};
}

FunctionSpec func_spec(int64_t cores = 1, int64_t memory_mb = 64) {
  FunctionSpec spec;
  spec.function_id = "fn";
  spec.image_ref = "fn";
  spec.required = {cores, memory_mb, 0};
  spec.max_duration_ms = 1000;
  return spec;
}

JobDescriptor shared_job(int64_t nodes = 2) {
  JobDescriptor job;
  job.job_id = "j1";
  job.sig = sig("batch");
  job.nodes_allocated = nodes;
  job.shared_flag = true;
  job.resources_per_node = {32, 64000, 0};
  return job;
}

}  // namespace

TEST_CASE("record_run stores and estimate_slowdown takes the median") {
  HistoryStore store;
  store.record_run(record("batch", "fn", 100000, 109000));
  auto one = store.estimate_slowdown(sig("batch"), sig("fn"));
  REQUIRE(one.has_value());
  CHECK(*one == doctest::Approx(1.09));

  store.record_run(record("batch", "fn", 100000, 105000));
  store.record_run(record("batch", "fn", 100000, 150000));
  auto med = store.estimate_slowdown(sig("batch"), sig("fn"));
  CHECK(*med == doctest::Approx(1.09));

  CHECK_FALSE(store.estimate_slowdown(sig("other"), sig("fn")).has_value());
}

TEST_CASE("record validation") {
  HistoryStore store;
  auto bad = record("batch", "fn", 0, 1000);
  CHECK_THROWS_AS(store.record_run(bad), Error);
  auto no_app = record("", "fn", 1, 1);
  CHECK_THROWS_AS(store.record_run(no_app), Error);
  ColocationRecord bad_sample = record("b", "f", 1, 1);
  bad_sample.samples.push_back({1.5, 0, 0, 0});
  CHECK_THROWS_AS(store.record_run(bad_sample), Error);
}

TEST_CASE("CPU-sharing workloads show negligible batch slowdown") {
  HistoryStore store;
  store.record_run(record("lulesh", "nas", 100000, 100200));
  store.record_run(record("lulesh", "nas", 100000, 99800));
  store.record_run(record("lulesh", "nas", 100000, 100500));
  auto est = store.estimate_slowdown(sig("lulesh"), sig("nas"));
  CHECK(*est == doctest::Approx(1.0).epsilon(0.01));
}

TEST_CASE("median slowdown shrugs off one outlier") {
  HistoryStore store;
  store.record_run(record("b", "f", 100, 105));
  store.record_run(record("b", "f", 100, 109));
  store.record_run(record("b", "f", 100, 112));
  double before = *store.estimate_slowdown(sig("b"), sig("f"));
  store.record_run(record("b", "f", 100, 10000));  // ratio 100
  double after = *store.estimate_slowdown(sig("b"), sig("f"));
  // With the outlier the median moves at most to the next ratio up.
  CHECK(after >= before);
  CHECK(after <= 1.12 + 1e-9);
}

TEST_CASE("model_stress is a per-dimension p90") {
  SUBCASE("constant samples") {
    std::vector<CounterSample> samples(5, sample(0.9, 0.1, 0.1));
    auto stress = model_stress(samples);
    CHECK(stress.cpu == doctest::Approx(0.9));
    CHECK(stress.memory == doctest::Approx(0.1));
    CHECK(stress.network == doctest::Approx(0.1));
  }

  SUBCASE("empty sample list") {
    CHECK_THROWS_AS(model_stress({}), Error);
  }

  SUBCASE("alternating bursts count as sustained demand") {
    std::vector<CounterSample> samples;
    for (int i = 0; i < 10; ++i) {
      samples.push_back(sample(0, i % 2 ? 1.0 : 0.0, 0));
    }
    CHECK(model_stress(samples).memory == doctest::Approx(1.0));
  }

  SUBCASE("matches a sorted-array oracle") {
    std::mt19937_64 rng(23);
    std::uniform_real_distribution<double> unit(0, 1);
    for (int round = 0; round < 200; ++round) {
      size_t n = 1 + rng() % 40;
      std::vector<CounterSample> samples;
      std::vector<double> cpu;
      for (size_t i = 0; i < n; ++i) {
        double v = unit(rng);
        samples.push_back(sample(v, 0, 0));
        cpu.push_back(v);
      }
      std::sort(cpu.begin(), cpu.end());
      size_t rank = (n * 9 + 9) / 10;
      double expected = cpu[std::min(rank, n) - 1];
      CHECK(model_stress(samples).cpu == doctest::Approx(expected));
    }
  }
}

TEST_CASE("decide_colocation gate order and verdicts") {
  HistoryStore store;
  PolicyConfig cfg;
  NodeView node{{36, 128000, 0}, {0, 0, 0}};
  FunctionSpec fn = func_spec(2, 1024);

  SUBCASE("hero jobs are exempt") {
    auto job = shared_job(512);
    auto d = decide_colocation(node, job, fn, std::nullopt, store, cfg);
    CHECK_FALSE(d.allowed);
    CHECK(d.reason == "hero-job-exempt");
  }

  SUBCASE("256 nodes is not yet a hero") {
    auto job = shared_job(256);
    CHECK(decide_colocation(node, job, fn, std::nullopt, store, cfg).allowed);
  }

  SUBCASE("opt-in dominates every other gate") {
    auto job = shared_job(512);
    job.shared_flag = false;
    job.partition = "compute";  // not the shared partition
    job.resources_per_node = {36, 128000, 0};  // no capacity either
    auto d = decide_colocation(node, job, fn, std::nullopt, store, cfg);
    CHECK(d.reason == "not-opted-in");
  }

  SUBCASE("shared partition counts as opt-in") {
    auto job = shared_job(4);
    job.shared_flag = false;
    job.partition = "shared";
    CHECK(decide_colocation(node, job, fn, std::nullopt, store, cfg).allowed);
  }

  SUBCASE("capacity after job and leases") {
    auto job = shared_job(4);
    NodeView tight{{36, 128000, 0}, {3, 1024, 0}};
    // 36 - 3 leased - 32 job = 1 core < 2 requested
    auto d = decide_colocation(tight, job, fn, std::nullopt, store, cfg);
    CHECK(d.reason == "no-capacity");
  }

  SUBCASE("history below threshold allows") {
    store.record_run(record("batch", "fn", 100000, 102000, 2));
    auto job = shared_job(4);
    auto d = decide_colocation(node, job, fn, std::nullopt, store, cfg);
    CHECK(d.allowed);
  }

  SUBCASE("history above threshold denies") {
    store.record_run(record("batch", "fn", 100000, 125000, 2));
    auto job = shared_job(4);
    auto d = decide_colocation(node, job, fn, std::nullopt, store, cfg);
    CHECK(d.reason == "interference");
  }

  SUBCASE("stress heuristic on first contact") {
    auto job = shared_job(4);
    store.record_profile(job.sig, {sample(0.9, 0.2, 0.1)});

    auto conflicting = decide_colocation(
        node, job, fn, std::vector<CounterSample>{sample(0.2, 0.2, 0.1)},
        store, cfg);
    CHECK(conflicting.reason == "stress-conflict");  // cpu 0.9+0.2 > 1.0

    auto fitting = decide_colocation(
        node, job, fn, std::vector<CounterSample>{sample(0.05, 0.2, 0.1)},
        store, cfg);
    CHECK(fitting.allowed);  // cpu 0.95 <= 1.0
  }

  SUBCASE("history presence suppresses the stress heuristic") {
    auto job = shared_job(4);
    store.record_profile(job.sig, {sample(1.0, 1.0, 1.0)});
    store.record_run(record("batch", "fn", 100000, 101000, 2));
    auto d = decide_colocation(
        node, job, fn, std::vector<CounterSample>{sample(1.0, 1.0, 1.0)},
        store, cfg);
    CHECK(d.allowed);  // slowdown 1.01 decides, stress never consulted
  }

  SUBCASE("no job on the node: capacity is the only gate") {
    auto d = decide_colocation(node, std::nullopt, fn, std::nullopt, store, cfg);
    CHECK(d.allowed);
    NodeView full{{36, 128000, 0}, {36, 128000, 0}};
    auto denied =
        decide_colocation(full, std::nullopt, fn, std::nullopt, store, cfg);
    CHECK(denied.reason == "no-capacity");
  }
}

TEST_CASE("decide_colocation is deterministic") {
  HistoryStore store;
  store.record_run(record("batch", "fn", 100, 108));
  std::mt19937_64 rng(31);
  std::uniform_int_distribution<int64_t> cores(0, 40);
  for (int i = 0; i < 300; ++i) {
    NodeView node{{36, 128000, 0}, {cores(rng), 0, 0}};
    auto job = shared_job(1 + cores(rng) * 20);
    job.shared_flag = (rng() % 2) == 0;
    auto fn = func_spec(1 + cores(rng) % 4, 64);
    auto a = decide_colocation(node, job, fn, std::nullopt, store);
    auto b = decide_colocation(node, job, fn, std::nullopt, store);
    CHECK(a.allowed == b.allowed);
    CHECK(a.reason == b.reason);
  }
}

TEST_CASE("history persists as JSON lines") {
  auto path = std::filesystem::temp_directory_path() /
              ("rfaas-policy-test-" + std::to_string(::getpid()) + ".jsonl");
  std::filesystem::remove(path);
  {
    HistoryStore store(path.string());
    auto rec = record("batch", "fn", 100000, 108000);
    rec.samples.push_back(sample(0.4, 0.2, 0.1));
    store.record_run(rec);
    store.record_run(record("batch", "fn", 100000, 112000));
  }
  {
    HistoryStore reloaded(path.string());
    CHECK(reloaded.size() == 2);
    auto est = reloaded.estimate_slowdown(sig("batch"), sig("fn"));
    CHECK(*est == doctest::Approx(1.10));
    CHECK(reloaded.profile(sig("batch")).size() == 1);
  }
  std::filesystem::remove(path);
}

TEST_CASE("signature_of buckets cores to powers of two") {
  auto spec = func_spec(5, 64);
  auto s = signature_of(spec);
  CHECK(s.app_id == "fn");
  CHECK(s.scale_class == 8);
  CHECK(signature_of(func_spec(1, 64)).scale_class == 1);
  CHECK(signature_of(func_spec(4, 64)).scale_class == 4);
}
