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

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "rfaas/bench.hpp"
#include "rfaas/client.hpp"
#include "rfaas/executor.hpp"
#include "rfaas/manager_http.hpp"
#include "rfaas/planner.hpp"
#include "rfaas/sandbox.hpp"
#include "rfaas/sim.hpp"

namespace {

using namespace rfaas;

std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v ? v : fallback;
}

std::map<std::string, std::string> parse_registry(const std::string& text) {
  std::map<std::string, std::string> registry;
  size_t pos = 0;
  while (pos < text.size()) {
    size_t comma = text.find(',', pos);
    if (comma == std::string::npos) comma = text.size();
    std::string pair = text.substr(pos, comma - pos);
    size_t eq = pair.find('=');
    if (eq == std::string::npos) {
      throw Error("parse", "registry entries look like image=entry: " + pair);
    }
    registry[pair.substr(0, eq)] = pair.substr(eq + 1);
    pos = comma + 1;
  }
  return registry;
}

int cmd_rm_serve(const std::string& listen, int64_t idle_timeout_s,
                 const std::string& history_path) {
  auto history = history_path.empty()
                     ? std::make_unique<policy::HistoryStore>()
                     : std::make_unique<policy::HistoryStore>(history_path);
  manager::RmConfig cfg = manager::RmConfig::from_env();
  cfg.idle_lease_timeout_s = idle_timeout_s;
  manager::ResourceManager rm(cfg, history.get());
  manager::RmService service(rm, listen);
  std::cerr << "resource manager listening on " << service.endpoint() << "\n";
  for (;;) std::this_thread::sleep_for(std::chrono::seconds(3600));
}

int cmd_executor_serve(executor::ExecutorConfig cfg,
                       const std::vector<std::string>& prewarm) {
  executor::Executor exec(cfg);
  exec.start();
  for (const auto& image : prewarm) exec.prewarm(image, 64);
  std::cerr << "executor " << cfg.node_id << " serving on " << exec.endpoint()
            << "\n";
  exec.wait();
  std::cerr << "executor " << cfg.node_id << " drained\n";
  return 0;
}

int cmd_invoke(const std::string& rm, FunctionSpec spec,
               const std::string& payload, int count) {
  client::FunctionHandle handle(spec, rm, "cli");
  int rc = 0;
  for (int i = 0; i < count; ++i) {
    auto result = handle.invoke(payload);
    nlohmann::json out{
        {"status", result.status == InvocationStatus::ok ? "ok"
                   : result.status == InvocationStatus::error
                       ? "error"
                       : "terminated"},
        {"payload", result.payload_str()},
        {"queue_ms", result.timings.queue_ms},
        {"sandbox_ms", result.timings.sandbox_ms},
        {"exec_ms", result.timings.exec_ms},
        {"node", handle.lease().node_id}};
    std::cout << out.dump() << "\n";
    if (result.status != InvocationStatus::ok) rc = 2;
  }
  handle.close();
  return rc;
}

int cmd_node_remove(const std::string& rm, const std::string& node_id,
                    bool immediate, int64_t deadline_s) {
  manager::RmClient client(rm);
  std::optional<int64_t> deadline;
  if (deadline_s >= 0) deadline = deadline_s;
  auto outcome = client.remove_node(node_id, immediate, deadline);
  nlohmann::json out{{"aborted", outcome.aborted},
                     {"completed", outcome.completed}};
  std::cout << out.dump() << "\n";
  return 0;
}

// Operator tool: send the drain frame straight to an executor.
int cmd_node_drain(const std::string& endpoint, bool immediate) {
  auto sock = net::connect_tcp(endpoint);
  wire::write_frame(sock, wire::Drain{immediate ? uint8_t{1} : uint8_t{0}});
  wire::Frame frame;
  if (!wire::read_frame(sock, frame)) {
    throw Error("connection-lost", "no drain report from " + endpoint);
  }
  auto& report = std::get<wire::DrainReport>(frame);
  nlohmann::json out{{"aborted", report.aborted},
                     {"completed", report.completed}};
  std::cout << out.dump() << "\n";
  return 0;
}

int cmd_plan(double t_local, double t_inv, double l, double b, double data,
             int64_t tasks) {
  planner::OffloadParams params{t_local, t_inv, l, b, data};
  auto plan = planner::partition_work(tasks, params);
  auto run = planner::simulate_plan(plan, params);
  nlohmann::json out{{"local_tasks", plan.local_tasks},
                     {"remote_tasks", plan.remote_tasks},
                     {"expected_makespan_ms", plan.expected_makespan_ms},
                     {"n_local", planner::min_local_batch(params)},
                     {"n_remote", planner::max_remote_inflight(params)},
                     {"simulated_makespan_ms", run.makespan_ms}};
  std::cout << out.dump(2) << "\n";
  return 0;
}

int cmd_simulate(const std::string& trace_path, const std::string& workload_path,
                 const std::string& scenario, const std::string& out_dir,
                 const std::string& history_path) {
  sim::SimWorkload workload;
  if (!workload_path.empty()) workload = sim::load_workload_file(workload_path);
  sim::SimConfig cfg;
  cfg.scenario = sim::scenario_from_string(scenario);
  cfg.policy = policy::PolicyConfig::from_env();
  std::unique_ptr<policy::HistoryStore> history;
  if (!history_path.empty()) {
    history = std::make_unique<policy::HistoryStore>(history_path);
    cfg.history = history.get();
  }
  sim::SimMetrics metrics;
  if (!trace_path.empty()) {
    auto trace = sim::load_trace_file(trace_path);
    for (const auto& w : trace.warnings) std::cerr << "warning: " << w << "\n";
    metrics = sim::run_simulation(trace, workload, cfg);
  } else if (!workload.nodes.empty()) {
    metrics = sim::run_simulation(workload, cfg);
  } else {
    throw Error("malformed", "need --trace or a workload with a nodes section");
  }
  sim::write_report(cfg.scenario, metrics, out_dir);
  std::cout << sim::metrics_json(cfg.scenario, metrics);
  return 0;
}

int cmd_gen_trace(int64_t nodes, double hours, uint64_t seed,
                  int64_t interval_s, const std::string& out_path) {
  sim::TraceGenConfig cfg;
  cfg.nodes = nodes;
  cfg.hours = hours;
  cfg.seed = seed;
  cfg.interval_s = interval_s;
  auto trace = sim::generate_trace(cfg);
  if (out_path.empty()) {
    sim::write_trace_csv(trace, std::cout);
  } else {
    std::ofstream out(out_path, std::ios::binary);
    if (!out) throw Error("io-error", "cannot write " + out_path);
    sim::write_trace_csv(trace, out);
  }
  return 0;
}

int cmd_bench_latency(const std::string& mode_str, int n, int warmup) {
  auto mode = bench::mode_from_string(mode_str);
  auto run = bench::run_latency(mode, n, warmup);
  std::cout << "i,total_us,queue_ms,sandbox_ms,exec_ms\n";
  for (size_t i = 0; i < run.samples.size(); ++i) {
    const auto& s = run.samples[i];
    std::printf("%zu,%.2f,%u,%u,%u\n", i, s.total_us, s.timings.queue_ms,
                s.timings.sandbox_ms, s.timings.exec_ms);
  }
  auto totals = run.totals_us();
  std::printf("p50_us,%.2f\n", bench::percentile(totals, 50));
  std::printf("p95_us,%.2f\n", bench::percentile(totals, 95));
  return 0;
}

int cmd_memsvc(const std::string& rm, const std::string& function_id,
               int64_t memory_mb, const std::vector<std::string>& ops) {
  FunctionSpec spec;
  spec.function_id = function_id;
  spec.image_ref = function_id;
  spec.required = {1, memory_mb, 0};
  spec.max_duration_ms = 60'000;
  spec.kind = FunctionKind::memory_service;
  client::FunctionHandle handle(spec, rm, "cli");

  uint64_t block = 0;
  for (const auto& op : ops) {
    std::vector<std::string> parts;
    size_t pos = 0;
    while (true) {
      size_t colon = op.find(':', pos);
      if (colon == std::string::npos) {
        parts.push_back(op.substr(pos));
        break;
      }
      parts.push_back(op.substr(pos, colon - pos));
      pos = colon + 1;
    }
    if (parts[0] == "alloc" && parts.size() == 2) {
      block = handle.mem_alloc(std::stoull(parts[1]));
      std::cout << "alloc block_id=" << block << "\n";
    } else if (parts[0] == "put" && parts.size() == 3) {
      std::vector<uint8_t> bytes(parts[2].begin(), parts[2].end());
      handle.mem_put(block, std::stoull(parts[1]), bytes);
      std::cout << "put " << bytes.size() << " bytes at " << parts[1] << "\n";
    } else if (parts[0] == "get" && parts.size() == 3) {
      auto bytes = handle.mem_get(block, std::stoull(parts[1]),
                                  static_cast<uint32_t>(std::stoul(parts[2])));
      std::cout << "get: " << std::string(bytes.begin(), bytes.end()) << "\n";
    } else if (parts[0] == "reclaim" && parts.size() == 1) {
      std::cout << "reclaimed to " << handle.mem_reclaim(block) << "\n";
    } else {
      throw Error("parse", "bad op: " + op +
                               " (alloc:SIZE | put:OFF:TEXT | get:OFF:LEN | "
                               "reclaim)");
    }
  }
  handle.close();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  rfaas::sandbox::maybe_run_sandbox_child(argc, argv);

  CLI::App app{"serverless runtime for batch-managed clusters"};
  app.require_subcommand(1);

  // rm serve
  auto* rm_cmd = app.add_subcommand("rm", "resource manager");
  auto* rm_serve = rm_cmd->add_subcommand("serve", "run the resource manager");
  std::string rm_listen = env_or("RM_LISTEN_ADDR", "127.0.0.1:8960");
  int64_t idle_timeout_s =
      std::stoll(env_or("RM_IDLE_LEASE_TIMEOUT_S", "300"));
  std::string rm_history;
  rm_serve->add_option("--listen", rm_listen, "host:port");
  rm_serve->add_option("--idle-timeout-s", idle_timeout_s,
                       "reclaim leases idle this long (0 disables)");
  rm_serve->add_option("--history", rm_history, "co-location history file");

  // executor serve
  auto* ex_cmd = app.add_subcommand("executor", "node worker");
  auto* ex_serve = ex_cmd->add_subcommand("serve", "run an executor");
  executor::ExecutorConfig ex_cfg;
  ex_cfg.rm_endpoint = env_or("RFAAS_RM_ENDPOINT", "");
  std::string ex_mode = "warm";
  std::string ex_registry, ex_sharing = "opt_in";
  std::vector<std::string> ex_prewarm;
  int64_t ex_hint = -1;
  ex_serve->add_option("--node-id", ex_cfg.node_id, "node identifier");
  ex_serve->add_option("--rm", ex_cfg.rm_endpoint, "resource manager host:port");
  ex_serve->add_option("--listen", ex_cfg.listen_addr, "host:port to serve on");
  ex_serve->add_option("--warm-pool-mb", ex_cfg.warm_pool_budget_mb,
                       "warm container pool budget");
  ex_serve->add_option("--serving-cores", ex_cfg.serving_cores,
                       "cores reserved for serving invocations");
  ex_serve->add_option("--mode", ex_mode, "hot|warm")
      ->check(CLI::IsMember({"hot", "warm"}));
  ex_serve->add_option("--registry", ex_registry,
                       "image=entry[,image=entry...]");
  std::string ex_total;
  ex_serve->add_option("--total", ex_total,
                       "node resources, cores=<n>,memory_mb=<n>,gpus=<n>");
  ex_serve->add_option("--cores", ex_cfg.total.cores, "node cores");
  ex_serve->add_option("--memory-mb", ex_cfg.total.memory_mb, "node memory");
  ex_serve->add_option("--gpus", ex_cfg.total.gpus, "node gpus");
  ex_serve->add_option("--availability-hint-s", ex_hint,
                       "expected seconds until the batch system reclaims");
  ex_serve->add_option("--sharing", ex_sharing, "opt_in|exclusive")
      ->check(CLI::IsMember({"opt_in", "exclusive"}));
  ex_serve->add_option("--prewarm", ex_prewarm, "images to park warm at start");

  // node remove/drain (operator tools)
  auto* node_cmd = app.add_subcommand("node", "node lifecycle operations");
  auto* node_remove =
      node_cmd->add_subcommand("remove", "return a node to the batch system");
  std::string nr_rm = env_or("RFAAS_RM_ENDPOINT", "127.0.0.1:8960");
  std::string nr_id;
  bool nr_immediate = false;
  int64_t nr_deadline_s = -1;
  node_remove->add_option("--rm", nr_rm, "resource manager host:port");
  node_remove->add_option("--node-id", nr_id)->required();
  node_remove->add_flag("--immediate", nr_immediate,
                        "abort in-flight invocations");
  node_remove->add_option("--deadline-s", nr_deadline_s,
                          "escalate a graceful drain after this long");
  auto* node_drain =
      node_cmd->add_subcommand("drain", "send a drain frame to an executor");
  std::string nd_endpoint;
  bool nd_immediate = false;
  node_drain->add_option("--endpoint", nd_endpoint, "executor host:port")
      ->required();
  node_drain->add_flag("--immediate", nd_immediate);

  // invoke
  auto* invoke = app.add_subcommand("invoke", "invoke a function");
  std::string inv_rm = env_or("RFAAS_RM_ENDPOINT", "127.0.0.1:8960");
  FunctionSpec inv_spec;
  inv_spec.required = {1, 64, 0};
  inv_spec.max_duration_ms = 30'000;
  std::string inv_payload, inv_payload_file;
  int inv_count = 1;
  invoke->add_option("--rm", inv_rm, "resource manager host:port");
  invoke->add_option("--function-id", inv_spec.function_id)->required();
  invoke->add_option("--image", inv_spec.image_ref,
                     "image (defaults to the function id)");
  invoke->add_option("--cores", inv_spec.required.cores);
  invoke->add_option("--memory-mb", inv_spec.required.memory_mb);
  invoke->add_option("--gpus", inv_spec.required.gpus);
  invoke->add_option("--max-duration-ms", inv_spec.max_duration_ms);
  invoke->add_option("--payload", inv_payload);
  invoke->add_option("--payload-file", inv_payload_file);
  invoke->add_option("-n", inv_count, "invocation count");

  // plan
  auto* plan = app.add_subcommand("plan", "offload partition plan");
  double p_tlocal = 0, p_tinv = 0, p_l = 0, p_b = 0, p_data = 0;
  int64_t p_tasks = 0;
  plan->add_option("--t-local-ms", p_tlocal)->required();
  plan->add_option("--t-inv-ms", p_tinv)->required();
  plan->add_option("--l-ms", p_l)->required();
  plan->add_option("--b-mbs", p_b)->required();
  plan->add_option("--data-mb", p_data)->required();
  plan->add_option("--tasks", p_tasks)->required();

  // simulate
  auto* simulate = app.add_subcommand("simulate", "run the cluster simulator");
  std::string sim_trace, sim_workload, sim_scenario = "colocated";
  std::string sim_out = "sim-out", sim_history;
  uint64_t sim_seed = 1;
  simulate->add_option("--trace", sim_trace, "trace CSV");
  simulate->add_option("--workload", sim_workload, "workload JSON");
  simulate->add_option("--scenario", sim_scenario,
                       "exclusive|ideal_partial|colocated");
  simulate->add_option("--out", sim_out, "report directory");
  simulate->add_option("--seed", sim_seed, "seed (recorded; replay is exact)");
  simulate->add_option("--history", sim_history, "co-location history file");

  // gen-trace
  auto* gen = app.add_subcommand("gen-trace", "generate a synthetic trace");
  int64_t g_nodes = 8, g_interval = 120;
  double g_hours = 24;
  uint64_t g_seed = 1;
  std::string g_out;
  gen->add_option("--nodes", g_nodes);
  gen->add_option("--hours", g_hours);
  gen->add_option("--seed", g_seed);
  gen->add_option("--interval-s", g_interval);
  gen->add_option("--out", g_out, "output file (default stdout)");

  // bench latency
  auto* bench_cmd = app.add_subcommand("bench", "microbenchmarks");
  auto* bench_lat = bench_cmd->add_subcommand("latency", "invocation latency");
  std::string b_mode = "warm";
  int b_n = 1000, b_warmup = 3;
  bench_lat->add_option("--mode", b_mode, "hot|warm|cold")
      ->check(CLI::IsMember({"hot", "warm", "cold"}));
  bench_lat->add_option("--n", b_n, "invocations");
  bench_lat->add_option("--warmup", b_warmup, "unmeasured warmup invocations");

  // memsvc
  auto* memsvc = app.add_subcommand("memsvc", "memory-service operations");
  std::string m_rm = env_or("RFAAS_RM_ENDPOINT", "127.0.0.1:8960");
  std::string m_fn = "memsvc";
  int64_t m_memory_mb = 128;
  std::vector<std::string> m_ops;
  memsvc->add_option("--rm", m_rm, "resource manager host:port");
  memsvc->add_option("--function-id", m_fn);
  memsvc->add_option("--memory-mb", m_memory_mb, "lease memory");
  memsvc->add_option("--op", m_ops,
                     "alloc:SIZE | put:OFF:TEXT | get:OFF:LEN | reclaim");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (rm_serve->parsed()) {
      return cmd_rm_serve(rm_listen, idle_timeout_s, rm_history);
    }
    if (ex_serve->parsed()) {
      ex_cfg.hot_mode = ex_mode == "hot";
      ex_cfg.image_registry = parse_registry(ex_registry);
      ex_cfg.sharing = manager::sharing_from_string(ex_sharing);
      if (ex_hint >= 0) ex_cfg.availability_hint_s = ex_hint;
      if (!ex_total.empty()) ex_cfg.total = rv_parse(ex_total);
      return cmd_executor_serve(ex_cfg, ex_prewarm);
    }
    if (node_remove->parsed()) {
      return cmd_node_remove(nr_rm, nr_id, nr_immediate, nr_deadline_s);
    }
    if (node_drain->parsed()) {
      return cmd_node_drain(nd_endpoint, nd_immediate);
    }
    if (invoke->parsed()) {
      if (inv_spec.image_ref.empty()) inv_spec.image_ref = inv_spec.function_id;
      std::string payload = inv_payload;
      if (!inv_payload_file.empty()) {
        std::ifstream in(inv_payload_file, std::ios::binary);
        if (!in) throw Error("io-error", "cannot read " + inv_payload_file);
        payload.assign(std::istreambuf_iterator<char>(in),
                       std::istreambuf_iterator<char>());
      }
      return cmd_invoke(inv_rm, inv_spec, payload, inv_count);
    }
    if (plan->parsed()) {
      return cmd_plan(p_tlocal, p_tinv, p_l, p_b, p_data, p_tasks);
    }
    if (simulate->parsed()) {
      return cmd_simulate(sim_trace, sim_workload, sim_scenario, sim_out,
                          sim_history);
    }
    if (gen->parsed()) {
      return cmd_gen_trace(g_nodes, g_hours, g_seed, g_interval, g_out);
    }
    if (bench_lat->parsed()) {
      return cmd_bench_latency(b_mode, b_n, b_warmup);
    }
    if (memsvc->parsed()) {
      return cmd_memsvc(m_rm, m_fn, m_memory_mb, m_ops);
    }
    std::cerr << app.help() << "\n";
    return 1;
  } catch (const rfaas::Error& e) {
    std::cerr << "error (" << e.code() << "): " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
