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

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "rfaas/sim.hpp"

using namespace rfaas;
using namespace rfaas::sim;

namespace {

FunctionSpec fn_spec(const std::string& id, int64_t cores,
                     int64_t memory_mb = 64) {
  FunctionSpec spec;
  spec.function_id = id;
  spec.image_ref = id;
  spec.required = {cores, memory_mb, 0};
  spec.max_duration_ms = 10'000'000;
  return spec;
}

// Two 36-core nodes running one 64-rank job (32 per node) for an hour.
SimWorkload striped_job_workload() {
  SimWorkload w;
  w.nodes = {{"n0", {36, 128000, 0}}, {"n1", {36, 128000, 0}}};
  BatchJob job;
  job.arrival_s = 0;
  job.duration_s = 3600;
  job.nodes = 2;
  job.cores_per_node = 32;
  job.memory_mb_per_node = 64000;
  job.shared_flag = true;
  job.sig = {"striped", 64, ""};
  w.batch_jobs = {job};
  return w;
}

}  // namespace

TEST_CASE("load_trace parses and validates") {
  SUBCASE("well-formed samples") {
    std::istringstream in(
        "t_s,node_id,state,free_cores,free_memory_mb\n"
        "0,n0,idle,36,128000\n"
        "120,n0,busy,4,64000\n"
        "240,n0,idle,36,128000\n");
    auto trace = load_trace(in);
    REQUIRE(trace.streams.count("n0") == 1);
    CHECK(trace.streams["n0"].size() == 3);
    CHECK(trace.interval_s == 120);
    CHECK(trace.warnings.empty());
  }

  SUBCASE("non-monotonic timestamps fail with a line number") {
    std::istringstream in(
        "t_s,node_id,state,free_cores,free_memory_mb\n"
        "120,n0,idle,36,128000\n"
        "0,n0,busy,4,64000\n");
    CHECK_THROWS_WITH_AS(load_trace(in), doctest::Contains(":3"), Error);
  }

  SUBCASE("bad header") {
    std::istringstream in("time,node,state\n");
    CHECK_THROWS_AS(load_trace(in), Error);
  }

  SUBCASE("bad state") {
    std::istringstream in(
        "t_s,node_id,state,free_cores,free_memory_mb\n"
        "0,n0,offline,36,128000\n");
    CHECK_THROWS_AS(load_trace(in), Error);
  }

  SUBCASE("gaps produce warnings, not errors") {
    std::istringstream in(
        "t_s,node_id,state,free_cores,free_memory_mb\n"
        "0,n0,idle,36,128000\n"
        "120,n0,idle,36,128000\n"
        "480,n0,idle,36,128000\n");
    auto trace = load_trace(in);
    CHECK(trace.warnings.size() == 1);
  }
}

TEST_CASE("generator output round-trips through the CSV parser") {
  TraceGenConfig cfg;
  cfg.nodes = 4;
  cfg.hours = 2;
  cfg.seed = 5;
  auto generated = generate_trace(cfg);

  std::ostringstream csv;
  write_trace_csv(generated, csv);
  std::istringstream in(csv.str());
  auto loaded = load_trace(in);

  size_t total = 0;
  for (const auto& [node, stream] : loaded.streams) total += stream.size();
  CHECK(total == generated.samples.size());
  for (const auto& s : generated.samples) {
    const auto& stream = loaded.streams.at(s.node_id);
    auto it = std::find_if(stream.begin(), stream.end(),
                           [&](const TraceSample& t) { return t.t_s == s.t_s; });
    REQUIRE(it != stream.end());
    CHECK(it->state == s.state);
    CHECK(it->free_cores == s.free_cores);
    CHECK(it->free_memory_mb == s.free_memory_mb);
  }
}

TEST_CASE("idle period estimation from discrete samples") {
  auto mk = [](int64_t t, NodeState st) {
    return TraceSample{t, "n0", st, st == NodeState::idle ? 36 : 0, 0};
  };

  SUBCASE("three idle samples, then busy") {
    std::vector<TraceSample> stream = {mk(0, NodeState::idle),
                                       mk(120, NodeState::idle),
                                       mk(240, NodeState::idle),
                                       mk(360, NodeState::busy)};
    auto periods = estimate_idle_periods(stream, 120);
    REQUIRE(periods.size() == 1);
    const auto& p = periods[0];
    CHECK(p.duration_estimate_s == 360);
    CHECK(p.start_lb_s == -120);
    CHECK(p.start_ub_s == 0);
    CHECK(p.end_lb_s == 240);
    CHECK(p.end_ub_s == 360);
    // Feasible duration interval: [240, 480].
    CHECK(p.end_lb_s - p.start_ub_s == 240);
    CHECK(p.end_ub_s - p.start_lb_s == 480);
  }

  SUBCASE("all-busy stream yields nothing") {
    std::vector<TraceSample> stream = {mk(0, NodeState::busy),
                                       mk(120, NodeState::busy)};
    CHECK(estimate_idle_periods(stream, 120).empty());
  }

  SUBCASE("single idle sample collapses the bounds") {
    std::vector<TraceSample> stream = {mk(0, NodeState::busy),
                                       mk(120, NodeState::idle),
                                       mk(240, NodeState::busy)};
    auto periods = estimate_idle_periods(stream, 120);
    REQUIRE(periods.size() == 1);
    CHECK(periods[0].duration_estimate_s == 120);
    CHECK(periods[0].start_ub_s == periods[0].end_lb_s);
  }
}

TEST_CASE("estimator honors the continuous-time oracle") {
  TraceGenConfig cfg;
  cfg.nodes = 32;
  cfg.hours = 24;
  cfg.seed = 9;
  auto generated = generate_trace(cfg);

  // Group samples per node.
  std::map<std::string, std::vector<TraceSample>> streams;
  for (const auto& s : generated.samples) streams[s.node_id].push_back(s);

  std::vector<double> abs_err_s;
  size_t matched = 0;
  for (const auto& w : generated.windows) {
    // The period covering this window, if any sample fell inside it.
    const auto& stream = streams.at(w.node_id);
    auto periods = estimate_idle_periods(stream, cfg.interval_s);
    const IdlePeriod* found = nullptr;
    for (const auto& p : periods) {
      int64_t first_sample_ms = p.start_ub_s * 1000;
      if (first_sample_ms >= w.start_ms && first_sample_ms < w.end_ms) {
        found = &p;
        break;
      }
    }
    if (found == nullptr) continue;  // window shorter than the sampling step
    ++matched;
    double true_s = static_cast<double>(w.end_ms - w.start_ms) / 1000.0;
    double lo = static_cast<double>(found->end_lb_s - found->start_ub_s);
    double hi = static_cast<double>(found->end_ub_s - found->start_lb_s);
    CHECK(true_s >= lo - 1e-9);
    CHECK(true_s <= hi + 1e-9);
    abs_err_s.push_back(
        std::abs(static_cast<double>(found->duration_estimate_s) - true_s));
  }
  REQUIRE(matched > 100);
  std::sort(abs_err_s.begin(), abs_err_s.end());
  double median_err = abs_err_s[abs_err_s.size() / 2];
  CHECK(median_err <= static_cast<double>(cfg.interval_s));
}

TEST_CASE("scenario arithmetic on the striped job") {
  SimConfig cfg;

  SUBCASE("exclusive: cores in use over cores available") {
    cfg.scenario = Scenario::exclusive;
    auto m = run_simulation(striped_job_workload(), cfg);
    CHECK(m.core_utilization == doctest::Approx(64.0 / 72.0));
    CHECK(m.batch_core_hours_billed == doctest::Approx(72.0));
    CHECK(m.functions_completed == 0);
  }

  SUBCASE("ideal partial: billed for requested cores only") {
    cfg.scenario = Scenario::ideal_partial;
    auto m = run_simulation(striped_job_workload(), cfg);
    CHECK(m.core_utilization == doctest::Approx(64.0 / 72.0));
    CHECK(m.batch_core_hours_billed == doctest::Approx(64.0));
  }

  SUBCASE("billed reduction matches the striped-job anchor") {
    cfg.scenario = Scenario::exclusive;
    auto exclusive = run_simulation(striped_job_workload(), cfg);
    cfg.scenario = Scenario::ideal_partial;
    auto partial = run_simulation(striped_job_workload(), cfg);
    double reduction = (exclusive.batch_core_hours_billed -
                        partial.batch_core_hours_billed) /
                       exclusive.batch_core_hours_billed;
    CHECK(reduction == doctest::Approx(8.0 / 72.0).epsilon(1e-9));
  }

  SUBCASE("colocated with a saturating stream fills the nodes") {
    auto w = striped_job_workload();
    w.queue_functions = true;
    // 4 idle cores per node; enough 4-core functions to cover the hour.
    for (int i = 0; i < 120; ++i) {
      w.function_stream.push_back({0, fn_spec("busy", 4), 60'000, std::nullopt});
    }
    cfg.scenario = Scenario::colocated;
    auto m = run_simulation(w, cfg);
    CHECK(m.core_utilization == doctest::Approx(1.0));
    CHECK(m.functions_completed == 120);
    CHECK(m.functions_rejected == 0);
    CHECK(m.batch_core_hours_billed == doctest::Approx(64.0));
  }
}

TEST_CASE("scenario ordering holds on a randomized workload") {
  std::mt19937_64 rng(51);
  for (int round = 0; round < 20; ++round) {
    SimWorkload w;
    int64_t nodes = 2 + static_cast<int64_t>(rng() % 4);
    for (int64_t n = 0; n < nodes; ++n) {
      w.nodes.push_back({gen_node_name(n), {16, 32000, 0}});
    }
    int64_t jobs = 1 + rng() % 3;
    for (int64_t j = 0; j < jobs; ++j) {
      BatchJob job;
      job.arrival_s = static_cast<int64_t>(rng() % 1000);
      job.duration_s = 60 + static_cast<int64_t>(rng() % 2000);
      job.nodes = 1 + static_cast<int64_t>(rng() % 2);
      job.cores_per_node = 4 + static_cast<int64_t>(rng() % 12);
      job.memory_mb_per_node = 1000;
      job.shared_flag = true;
      job.sig = {"job" + std::to_string(j), 8, ""};
      w.batch_jobs.push_back(job);
    }
    for (int f = 0; f < 40; ++f) {
      w.function_stream.push_back({static_cast<int64_t>(rng() % 3000),
                                   fn_spec("fn", 1 + (int64_t)(rng() % 4)),
                                   1000 + (int64_t)(rng() % 60000),
                                   std::nullopt});
    }

    double util[3];
    double billed[3];
    Scenario scenarios[3] = {Scenario::exclusive, Scenario::ideal_partial,
                             Scenario::colocated};
    for (int s = 0; s < 3; ++s) {
      SimConfig cfg;
      cfg.scenario = scenarios[s];
      auto m = run_simulation(w, cfg);
      util[s] = m.core_utilization;
      billed[s] = m.batch_core_hours_billed;
    }
    CHECK(util[2] >= util[1] - 1e-12);   // colocated >= ideal_partial
    CHECK(util[1] >= util[0] - 1e-12);   // functions never displace batch
    CHECK(billed[1] <= billed[0] + 1e-12);
  }
}

TEST_CASE("co-location slowdown stretches function runtime") {
  policy::HistoryStore history;
  policy::ColocationRecord rec;
  rec.batch_sig = {"striped", 64, ""};
  rec.func_sig = {"busy", 4, ""};
  rec.exclusive_runtime_ms = 100000;
  rec.colocated_runtime_ms = 105000;
  history.record_run(rec);

  auto w = striped_job_workload();
  w.function_stream.push_back(
      {0, fn_spec("busy", 4), 60'000, policy::WorkloadSignature{"busy", 4, ""}});

  SimConfig cfg;
  cfg.scenario = Scenario::colocated;
  cfg.history = &history;
  auto m = run_simulation(w, cfg);
  CHECK(m.functions_completed == 1);
  // 60 s at slowdown 1.05 -> 63 s of core time for 4 cores.
  double expected_fn_core_hours = 4.0 * 63.0 / 3600.0;
  double base = 64.0 * 1.0;  // job core-hours
  double total_core_hours = 72.0 * (3600.0 / 3600.0);
  CHECK(m.core_utilization ==
        doctest::Approx((base + expected_fn_core_hours) / total_core_hours));
}

TEST_CASE("functions queue when enabled and reject when not") {
  SimWorkload w;
  w.nodes = {{"n0", {4, 8000, 0}}};
  w.function_stream = {{0, fn_spec("a", 4), 10'000, std::nullopt},
                       {0, fn_spec("b", 4), 10'000, std::nullopt}};
  SimConfig cfg;
  cfg.scenario = Scenario::colocated;

  SUBCASE("rejection by default") {
    auto m = run_simulation(w, cfg);
    CHECK(m.functions_completed == 1);
    CHECK(m.functions_rejected == 1);
  }

  SUBCASE("queueing runs both") {
    w.queue_functions = true;
    auto m = run_simulation(w, cfg);
    CHECK(m.functions_completed == 2);
    CHECK(m.functions_rejected == 0);
  }

  SUBCASE("queue timeout rejects the straggler") {
    w.queue_functions = true;
    w.queue_timeout_s = 5;
    auto m = run_simulation(w, cfg);
    CHECK(m.functions_completed == 1);
    CHECK(m.functions_rejected == 1);
  }
}

TEST_CASE("reserved serving cores are held out of placement") {
  SimWorkload w;
  w.nodes = {{"n0", {4, 8000, 0}}};
  w.reserved_serving_cores = 1;
  w.function_stream = {{0, fn_spec("a", 4), 1000, std::nullopt}};
  SimConfig cfg;
  cfg.scenario = Scenario::colocated;
  auto m = run_simulation(w, cfg);
  CHECK(m.functions_rejected == 1);  // only 3 cores offered
}

TEST_CASE("trace-driven replay places functions into idle fragments") {
  std::istringstream in(
      "t_s,node_id,state,free_cores,free_memory_mb\n"
      "0,n0,busy,4,64000\n"
      "120,n0,idle,36,128000\n"
      "240,n0,idle,36,128000\n"
      "360,n0,busy,0,1000\n");
  auto trace = load_trace(in);

  SimWorkload w;
  w.function_stream = {{130, fn_spec("fn", 8, 1000), 30'000, std::nullopt}};
  SimConfig cfg;
  cfg.scenario = Scenario::colocated;
  auto m = run_simulation(trace, w, cfg);
  CHECK(m.functions_completed == 1);

  // A function that cannot fit the busy fragment is rejected.
  SimWorkload big;
  big.function_stream = {{0, fn_spec("fn", 8, 1000), 1000, std::nullopt}};
  auto m2 = run_simulation(trace, big, cfg);
  CHECK(m2.functions_completed == 0);
  CHECK(m2.functions_rejected == 1);
}

TEST_CASE("batch work evicts co-located functions when a trace reclaims") {
  std::istringstream in(
      "t_s,node_id,state,free_cores,free_memory_mb\n"
      "0,n0,idle,8,16000\n"
      "120,n0,busy,0,1000\n"
      "240,n0,busy,0,1000\n");
  auto trace = load_trace(in);
  SimWorkload w;
  w.function_stream = {{0, fn_spec("fn", 8, 1000), 600'000, std::nullopt}};
  SimConfig cfg;
  cfg.scenario = Scenario::colocated;
  auto m = run_simulation(trace, w, cfg);
  CHECK(m.functions_completed == 0);
  CHECK(m.functions_rejected == 1);
  CHECK(m.core_utilization > 0);  // partial run still counted as usage
}

TEST_CASE("idle_node_throughput") {
  CHECK(idle_node_throughput(1, 1000, 36) == doctest::Approx(1.0));
  CHECK(idle_node_throughput(2, 1000, 36, {{2, 0.975}}) ==
        doctest::Approx(1.95));
  CHECK(idle_node_throughput(32, 1000, 36) == doctest::Approx(32.0));
  // More functions than cores run in waves.
  CHECK(idle_node_throughput(8, 1000, 4) == doctest::Approx(4.0));
  CHECK_THROWS_AS(idle_node_throughput(0, 1000, 4), Error);
}

TEST_CASE("reports have the fixed schema and round-trip") {
  SimConfig cfg;
  cfg.scenario = Scenario::ideal_partial;
  auto m = run_simulation(striped_job_workload(), cfg);

  auto csv = metrics_csv(Scenario::ideal_partial, m);
  CHECK(csv.rfind("scenario,core_utilization,memory_utilization,"
                  "functions_completed,functions_rejected,"
                  "batch_core_hours_billed\n",
                  0) == 0);
  CHECK(csv.find("ideal_partial,") != std::string::npos);

  auto parsed = nlohmann::json::parse(metrics_json(Scenario::ideal_partial, m));
  SimMetrics round_trip = parsed.get<SimMetrics>();
  CHECK(round_trip.core_utilization == m.core_utilization);
  CHECK(round_trip.memory_utilization == m.memory_utilization);
  CHECK(round_trip.functions_completed == m.functions_completed);
  CHECK(round_trip.functions_rejected == m.functions_rejected);
  CHECK(round_trip.batch_core_hours_billed == m.batch_core_hours_billed);
  CHECK(round_trip.node_throughput_relative == m.node_throughput_relative);
}

TEST_CASE("identical runs write byte-identical reports") {
  auto dir_a = std::filesystem::temp_directory_path() / "rfaas-sim-a";
  auto dir_b = std::filesystem::temp_directory_path() / "rfaas-sim-b";
  auto w = striped_job_workload();
  w.queue_functions = true;
  for (int i = 0; i < 20; ++i) {
    w.function_stream.push_back({0, fn_spec("busy", 4), 60'000, std::nullopt});
  }
  for (const auto& dir : {dir_a, dir_b}) {
    SimConfig cfg;
    cfg.scenario = Scenario::colocated;
    auto m = run_simulation(w, cfg);
    write_report(cfg.scenario, m, dir.string());
  }
  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in),
                       std::istreambuf_iterator<char>());
  };
  CHECK(slurp(dir_a / "report.csv") == slurp(dir_b / "report.csv"));
  CHECK(slurp(dir_a / "report.json") == slurp(dir_b / "report.json"));
  CHECK(!slurp(dir_a / "report.csv").empty());
  std::filesystem::remove_all(dir_a);
  std::filesystem::remove_all(dir_b);
}

TEST_CASE("infeasible jobs are recorded, not fatal") {
  SimWorkload w;
  w.nodes = {{"n0", {4, 8000, 0}}};
  BatchJob job;
  job.arrival_s = 0;
  job.duration_s = 100;
  job.nodes = 1;
  job.cores_per_node = 64;  // no node this large
  job.memory_mb_per_node = 1000;
  job.sig = {"giant", 64, ""};
  w.batch_jobs = {job};
  SimConfig cfg;
  cfg.scenario = Scenario::colocated;
  Simulation sim(w, cfg);
  auto m = sim.run();
  CHECK(m.batch_core_hours_billed == 0);
  REQUIRE(sim.warnings().size() == 1);
  CHECK(sim.warnings()[0].find("giant") != std::string::npos);
}
